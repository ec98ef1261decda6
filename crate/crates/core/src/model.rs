//! The full network: encoder, localization decoder and prototype network
//! wired together over one parameter store.

use crate::encoder::{encode_graph, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Array, Graph, ParamSpec, ParamStore};
use crate::pmn::{assess_graph, PmnConfig, Prototype, PrototypeBank, TargetMask};
use crate::uld::{localize_graph, normalized_uncertainty, BoundingBox, CornerPrediction, UldConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub uld: UldConfig,
    pub pmn: PmnConfig,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pmn.validate()?;
        if !matches!(self.uld.upsample, 2 | 4) {
            return Err(Error::Config(format!("upsample factor {} not in {{2, 4}}", self.uld.upsample)));
        }
        if self.uld.head_channels == 0 || !(self.uld.sigma_floor > 0.0) {
            return Err(Error::Config("decoder channels and sigma floor must be positive".into()));
        }
        Ok(())
    }

    /// Side of the decoder heads' grid.
    pub fn head_grid(&self) -> usize {
        self.encoder.search_grid().0 * self.uld.upsample
    }

    /// Parameters trained in the first stage.
    pub fn stage1_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.param_specs();
        specs.extend(self.uld.param_specs(self.encoder.width));
        specs
    }

    pub fn stage2_specs(&self) -> Vec<ParamSpec> {
        self.pmn.param_specs(self.encoder.width)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.stage1_specs();
        specs.extend(self.stage2_specs());
        specs
    }
}

/// Whether a parameter belongs to the prototype network.
pub fn is_pmn_param(name: &str) -> bool {
    name.starts_with("pmn.")
}

/// Encoder outputs kept for the reliability assessment.
#[derive(Clone, Debug)]
pub struct Features {
    pub f_t: Array,
    pub f_s: Array,
}

/// Encodes a pair and decodes corners; returns the prediction in search pixels.
pub fn localize(
    template: &Array,
    search: &Array,
    cfg: &NetConfig,
    params: &ParamStore,
) -> Result<(CornerPrediction, Features)> {
    let mut g = Graph::new(params);
    let enc = encode_graph(&mut g, template, search, &cfg.encoder)?;
    let loc = localize_graph(&mut g, enc.search, &cfg.uld)?;
    let pred = CornerPrediction::from_normalized(
        g.value(loc.mu).data(),
        g.value(loc.sigma_at_corners).data(),
        g.value(loc.prob).clone(),
        g.value(loc.sigma_map).clone(),
        cfg.encoder.search_size as f64,
    );
    let features = Features {
        f_t: g.value(enc.template).clone(),
        f_s: g.value(enc.search).clone(),
    };
    Ok((pred, features))
}

/// Confidence and reweighted prototype for features, a σ map (fractions of
/// the search side) and a target box in normalized search coordinates.
pub fn assess(
    features: &Features,
    unc_map: &Array,
    target: &BoundingBox,
    bank: &PrototypeBank,
    frame: usize,
    cfg: &NetConfig,
    params: &ParamStore,
) -> Result<(f64, Prototype)> {
    let (_, h, w) = unc_map.dims3()?;
    let mask = TargetMask::from_box(target, h, w);
    let mut g = Graph::new(params);
    let ft = g.leaf(features.f_t.clone());
    let fs = g.leaf(features.f_s.clone());
    let u = g.leaf(normalized_uncertainty(unc_map));
    let out = assess_graph(&mut g, ft, fs, u, cfg.uld.upsample, &mask, bank, &cfg.pmn)?;
    let p = g.value(out.probs).data()[1];
    let proto = Prototype::new(Array::vector(g.value(out.p_star).data()), frame, p)?;
    Ok((p, proto))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            encoder: EncoderConfig {
                patch: 8,
                width: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                template_size: 16,
                search_size: 32,
            },
            uld: UldConfig {
                head_channels: 4,
                ..UldConfig::default()
            },
            pmn: PmnConfig {
                key_width: 4,
                hidden: 8,
                ..PmnConfig::default()
            },
        }
    }

    #[test]
    fn end_to_end_shapes() {
        let cfg = tiny();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ParamStore::initialize(&cfg.param_specs(), &mut rng).unwrap();
        let t = Array::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let s = Array::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let (pred, feats) = localize(&t, &s, &cfg, &params).unwrap();
        assert_eq!(pred.prob_map.shape(), &[2, 8, 8]);
        assert_eq!(cfg.head_grid(), 8);
        assert!(pred.sigma.iter().all(|&v| v > 0.0));
        let bank = PrototypeBank::new(6).unwrap();
        let (p, proto) = assess(&feats, &pred.unc_map, &pred.normalized_box(), &bank, 3, &cfg, &params).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(proto.width(), 8);
        assert_eq!(proto.source_frame, 3);
    }
}
