//! Trajectory ingestion, synthetic scenes, windowing and ego-predictor
//! preprocessing.

pub mod ethucy;
pub mod preprocess;
pub mod synth;
pub mod window;

pub use ethucy::{parse_ethucy, write_ethucy, RawRecord};
pub use preprocess::{
    haar_forward, haar_inverse, linear_extrapolate, linear_fit_separate, translate_from_ego_origin,
    translate_to_ego_origin, LinearFit,
};
pub use synth::{synth_generate, SynthConfig, SynthScene, TurnStyle};
pub use window::{
    build_windows, split_leave_one_out, HorizonConfig, Point, SceneFile, SceneWindow,
};
