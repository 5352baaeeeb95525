//! Saliency-guided adversarial curriculum training for point-cloud
//! classifiers.
//!
//! A meta-learned teacher supplies input-gradient saliency maps. They steer
//! a perturbation network and a noise curriculum that together train a
//! robust student. A closed-form LiDAR power, energy and resolution budget
//! maps sensor operating points to perturbation severities.

pub mod actstudent;
pub mod config;
pub mod error;
pub mod evalreport;
pub mod lidarmodel;
pub mod metateacher;
pub mod nn;
pub mod pipeline;
pub mod perturb;
pub mod pointcloud;
pub mod rng;
pub mod saliency;
pub mod tensorgraph;

pub use error::{Error, Result};
