//! Survey pipeline for locating parkour-friendly architecture.
//!
//! A region is swept on a lattice whose spacing matches the ground footprint
//! of one zoom-21 satellite tile. At every lattice point one satellite tile
//! and four street-level images (headings 0/90/180/270) are acquired through
//! a cached, rate-limited, cost-accounted client. Satellite tiles are
//! downscaled and split into four classifier inputs; street images go
//! through an instance detector for short walls, railings and stairs. Hit
//! counts above a threshold mark the coordinate as a candidate spot, which
//! lands in an event-sourced store where a human reviewer records verdicts.
//!
//! | module | role |
//! |---|---|
//! | [`geo`] | ground resolution, tile footprint, survey lattice |
//! | [`imagery`] | requests, cache, providers, rate limit, cost ledger |
//! | [`preprocess`] | 640→512 box downscale, quadrant split |
//! | [`detectors`] | backend trait and fixture/heuristic/external backends |
//! | [`annotations`] | VIA project parsing |
//! | [`scoring`] | hit counts, threshold decision, combined probability |
//! | [`store`] | candidate database, verdicts, stats, GeoJSON |
//! | [`metrics`] | confusion matrices, count agreement |
//! | [`survey`] | configuration, dry run, survey runner |

pub mod annotations;
pub mod clock;
pub mod detectors;
pub mod geo;
pub mod imagery;
pub mod metrics;
pub mod preprocess;
pub mod raster;
pub mod scoring;
pub mod store;
pub mod survey;
