//! Feature extraction, carrier projection and message decoding.

pub mod carriers;
pub mod detection;
pub mod extractor;

pub use carriers::CarrierSet;
pub use detection::{
    bit_accuracy, decode, decode_projections, detection_threshold, hinge_loss_projections,
    matched_bits, msg_loss, msg_loss_and_grad, tpr_at_fpr, Message,
};
pub use extractor::{ExtractorOptions, FeatureExtractor};

use crate::error::Result;
use crate::grid::LatentGrid;

/// Extractor and carriers used together as the message decoder.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a> {
    pub extractor: &'a FeatureExtractor,
    pub carriers: &'a CarrierSet,
}

impl Decoder<'_> {
    pub fn projections(&self, image: &LatentGrid) -> Result<Vec<f64>> {
        self.carriers.project(&self.extractor.extract(image)?)
    }

    pub fn decode(&self, image: &LatentGrid) -> Result<Message> {
        Ok(decode_projections(&self.projections(image)?))
    }

    /// Hinge loss at the image and its gradient with respect to the image.
    pub fn loss_and_grad(
        &self,
        image: &LatentGrid,
        message: &Message,
        margin: f64,
    ) -> Result<(f64, LatentGrid)> {
        let e = self.extractor.extract(image)?;
        let (loss, ge) = msg_loss_and_grad(&e, self.carriers, message, margin)?;
        Ok((loss, self.extractor.extract_vjp(image, &ge)?))
    }
}
