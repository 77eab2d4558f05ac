//! A deterministic generator over synthetic attribute metadata. It answers
//! the three prompt roles from an image's attribute signature: a seeded
//! single-attribute flip for modifications, the flipped signature's
//! description for target texts, and the current signature's description
//! for captions. Pure function of `(seed, image, context)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Generator, GeneratorError, PromptRole};
use crate::corpus::synth::{description_phrase, modification_phrase, parse_modification};
use crate::corpus::{AttributeSchema, ImageRecord};
use crate::encoder::fnv1a64;

#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    schema: AttributeSchema,
    seed: u64,
}

impl TemplateGenerator {
    pub fn new(schema: AttributeSchema, seed: u64) -> Self {
        Self { schema, seed }
    }

    /// Recovers the attribute schema from corpus metadata.
    pub fn from_corpus(records: &[ImageRecord], seed: u64) -> Result<Self, GeneratorError> {
        let schema = AttributeSchema::from_corpus(records)
            .map_err(|e| GeneratorError::Other(e.to_string()))?;
        Ok(Self::new(schema, seed))
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn signature(&self, image: &ImageRecord) -> Result<Vec<String>, GeneratorError> {
        self.schema
            .signature_of(image)
            .map_err(|e| GeneratorError::Other(e.to_string()))
    }
}

impl Generator for TemplateGenerator {
    fn generate(
        &self,
        image: &ImageRecord,
        role: PromptRole,
        _prompt_body: &str,
        context: Option<&str>,
    ) -> Result<String, GeneratorError> {
        match role {
            PromptRole::Modification => {
                let sig = self.signature(image)?;
                let flippable: Vec<usize> = (0..self.schema.families.len())
                    .filter(|&f| self.schema.families[f].values.len() >= 2)
                    .collect();
                if flippable.is_empty() {
                    return Err(GeneratorError::Other(
                        "no attribute family has two or more values to flip".into(),
                    ));
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(image.id.as_bytes()));
                let fam = &self.schema.families[flippable[rng.gen_range(0..flippable.len())]];
                let current = &sig[self.schema.families.iter().position(|f| f.name == fam.name).unwrap()];
                let others: Vec<&String> = fam.values.iter().filter(|v| *v != current).collect();
                let value = others[rng.gen_range(0..others.len())];
                Ok(modification_phrase(&fam.name, value))
            }
            PromptRole::TargetText => {
                let modification = context.ok_or_else(|| {
                    GeneratorError::Other("target text generation needs the modification".into())
                })?;
                let (family, value) = parse_modification(modification).ok_or_else(|| {
                    GeneratorError::Other(format!("unparseable modification {modification:?}"))
                })?;
                let mut sig = self.signature(image)?;
                let pos = self
                    .schema
                    .families
                    .iter()
                    .position(|f| f.name == family)
                    .ok_or_else(|| {
                        GeneratorError::Other(format!("unknown attribute family {family:?}"))
                    })?;
                sig[pos] = value.to_string();
                Ok(description_phrase(&sig))
            }
            PromptRole::Caption => {
                let sig = self.signature(image)?;
                Ok(description_phrase(&sig))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureMatrix;
    use std::collections::BTreeMap;

    fn schema() -> AttributeSchema {
        AttributeSchema::parse("color=red,blue,green;shape=cube,sphere").unwrap()
    }

    fn image(id: &str, color: &str, shape: &str) -> ImageRecord {
        let mut meta = BTreeMap::new();
        meta.insert("color".into(), color.into());
        meta.insert("shape".into(), shape.into());
        ImageRecord::new(id, FeatureMatrix::new(1, 2, vec![1.0, 0.0]).unwrap(), meta).unwrap()
    }

    #[test]
    fn modification_flips_exactly_one_attribute() {
        let gen = TemplateGenerator::new(schema(), 7);
        let img = image("img1", "red", "cube");
        let text = gen
            .generate(&img, PromptRole::Modification, "", None)
            .unwrap();
        let (family, value) = parse_modification(&text).unwrap();
        let fam = gen.schema().family(family).unwrap();
        assert!(fam.values.iter().any(|v| v == value));
        assert_ne!(img.meta[family], value, "flip must change the value");
    }

    #[test]
    fn determinism_is_per_image_not_per_call_order() {
        let gen = TemplateGenerator::new(schema(), 7);
        let a = image("img1", "red", "cube");
        let b = image("img2", "blue", "sphere");
        let a1 = gen.generate(&a, PromptRole::Modification, "", None).unwrap();
        let _ = gen.generate(&b, PromptRole::Modification, "", None).unwrap();
        let a2 = gen.generate(&a, PromptRole::Modification, "", None).unwrap();
        assert_eq!(a1, a2);
        let other_seed = TemplateGenerator::new(schema(), 8);
        // different seeds generally flip differently; just check purity holds
        let a3 = other_seed.generate(&a, PromptRole::Modification, "", None).unwrap();
        let a4 = other_seed.generate(&a, PromptRole::Modification, "", None).unwrap();
        assert_eq!(a3, a4);
    }

    #[test]
    fn target_text_applies_the_flip() {
        let gen = TemplateGenerator::new(schema(), 0);
        let img = image("img9", "red", "cube");
        let text = gen
            .generate(&img, PromptRole::TargetText, "", Some("change the color to blue"))
            .unwrap();
        assert_eq!(text, "a blue cube");
    }

    #[test]
    fn caption_describes_the_current_signature() {
        let gen = TemplateGenerator::new(schema(), 0);
        let img = image("img9", "red", "cube");
        let text = gen.generate(&img, PromptRole::Caption, "", None).unwrap();
        assert_eq!(text, "a red cube");
    }

    #[test]
    fn missing_attribute_metadata_is_an_error() {
        let gen = TemplateGenerator::new(schema(), 0);
        let img = ImageRecord::new(
            "bare",
            FeatureMatrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            BTreeMap::new(),
        )
        .unwrap();
        assert!(gen.generate(&img, PromptRole::Caption, "", None).is_err());
    }

    #[test]
    fn from_corpus_recovers_families() {
        let imgs = vec![image("a", "red", "cube"), image("b", "blue", "sphere")];
        let gen = TemplateGenerator::from_corpus(&imgs, 0).unwrap();
        assert_eq!(gen.schema().families.len(), 2);
        assert!(gen.schema().family("color").is_some());
        assert!(gen.schema().family("shape").is_some());
    }
}
