//! Learned event-camera surfaces.
//!
//! A grid of LSTM cells with shared parameters reads the events of every
//! pixel (or receptive field) in arrival order; the last hidden state of each
//! cell becomes that cell's entry in a dense `H × W × C` surface. The layer is
//! differentiable end to end, so the surface can be trained jointly with
//! whatever consumes it.
//!
//! ```
//! use evsurface::{Event, EventBatch, EventStream, FeatureConfig, LayerConfig, MatrixLstm};
//!
//! let events = vec![Event::new(1, 0, 10.0, 1), Event::new(0, 1, 20.0, 1), Event::new(1, 0, 30.0, -1)];
//! let batch = EventBatch::from_streams(vec![EventStream::new(2, 2, events).unwrap()]).unwrap();
//! let model = MatrixLstm::new(LayerConfig::new(4, 2, FeatureConfig::default()), 0).unwrap();
//! let surface = model.reconstruct(&batch).unwrap();
//! assert_eq!((surface.height, surface.width, surface.channels), (2, 2, 8));
//! assert!(surface.cell(0, 0, 0).iter().all(|&v| v == 0.0));
//! ```

pub mod adam;
pub mod checks;
pub mod encoding;
pub mod error;
pub mod event_io;
pub mod events;
pub mod grouping;
pub mod harness;
pub mod layer;
pub mod lstm;
pub mod oracle;
pub mod se;
pub mod surface;

pub use adam::{adam_step, AdamState};
pub use encoding::{encode_features, FeatureConfig, FeatureRows, TimeFeature};
pub use error::{Error, Result};
pub use event_io::{read_event_file, write_event_file, EventFormat};
pub use events::{Event, EventBatch, EventStream, ValidationReport, Violation};
pub use grouping::{group_by_pixel, group_by_time, unfold_receptive_fields, GroupedEvents};
pub use layer::{layer_backward, layer_forward, reconstruct, LayerConfig, LayerGrads, LayerTape, MatrixLstm};
pub use lstm::{LstmParams, LstmState};
pub use se::SeParams;
pub use surface::SurfaceTensor;
