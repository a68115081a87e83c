//! Articulated-object joint perception at desk scale.
//!
//! The crate is organized around one pipeline: procedurally generated
//! articulated scenes ([`synth`]) are rendered to RGB-D observations, a
//! multimodal network ([`percept`]) fuses image and point-cloud features to
//! predict joint parameters, a staged trainer ([`train`]) fits that network,
//! a DQN policy ([`active`]) repositions the camera when the perception
//! score is low, and the perceived parameters drive screw-motion point-cloud
//! manipulation ([`geom`]). Everything learnable runs on the in-crate
//! reverse-mode autodiff core ([`tensor`]).

pub mod active;
pub mod geom;
pub mod percept;
pub mod synth;
pub mod tensor;
pub mod train;
