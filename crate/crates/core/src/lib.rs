//! Measuring how often concepts occur in image-text pretraining data and
//! relating those counts to downstream performance.

pub mod corpus_io;
pub mod curation;
pub mod image_tags;
pub mod inverted_index;
pub mod matched_freq;
pub mod text_pipeline;
pub mod trend_stats;
