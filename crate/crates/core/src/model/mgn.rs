use std::collections::BTreeMap;

use candle_core::{Device, Tensor};

use super::config::{BranchConfig, Landmark, ModelConfig};
use super::features::{BranchEmbedding, EmbeddingBundle, FeatureId, FeatureKind};
use super::head::ClassifierHead;
use super::layers::{Bottleneck, Reduction, Scope, Stem};
use super::params::{Init, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::ops;

const TRUNK_PREFIX: &str = "backbone";
const HEAD_INIT_STD: f64 = 0.001;

#[derive(Debug, Clone)]
struct Branch {
    config: BranchConfig,
    blocks: Vec<Bottleneck>,
    global_reduction: Reduction,
    part_reductions: Vec<Reduction>,
}

/// One residual block of the backbone, before assignment to trunk or branch.
#[derive(Debug, Clone, Copy)]
struct BlockPlan {
    landmark: Landmark,
    c_in: usize,
    width: usize,
    c_out: usize,
    /// `None` for the first block of the last stage, whose stride is set
    /// per branch.
    stride: Option<usize>,
}

impl BlockPlan {
    fn logical(&self) -> String {
        format!("layer{}.{}", self.landmark.stage - 1, self.landmark.block - 1)
    }
}

fn plan_blocks(config: &ModelConfig) -> Vec<BlockPlan> {
    let spec = config.spec();
    let mut c_in = spec.stem_channels;
    let mut plan = Vec::new();
    for (i, (&width, &depth)) in spec.widths.iter().zip(&spec.depths).enumerate() {
        let stage = i + 2;
        let c_out = width * spec.expansion;
        for block in 1..=depth {
            let stride = match (stage, block) {
                (5, 1) => None,
                (2, _) | (_, 2..) => Some(1),
                _ => Some(2),
            };
            plan.push(BlockPlan {
                landmark: Landmark { stage, block },
                c_in,
                width,
                c_out,
                stride,
            });
            c_in = c_out;
        }
    }
    plan
}

/// The multi-branch embedding network.
///
/// A ResNet trunk is shared up to `split_after`; each branch then owns an
/// independent copy of the remaining blocks (initialized with the same
/// values), global max-pools its output map as a whole and per horizontal
/// stripe, and reduces every pooled vector with its own 1×1 convolution,
/// batch norm and rectifier.
#[derive(Debug, Clone)]
pub struct Mgn {
    config: ModelConfig,
    store: ParamStore,
    stem: Stem,
    trunk: Vec<Bottleneck>,
    branches: Vec<Branch>,
    heads: BTreeMap<FeatureId, ClassifierHead>,
}

/// Builds the network described by `config` on the CPU.
pub fn build_model(config: &ModelConfig) -> Result<Mgn> {
    Mgn::new(config, &Device::Cpu)
}

impl Mgn {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let spec = config.spec();
        let store = ParamStore::new(device.clone(), config.init_seed);
        let stem = Stem::new(&store, TRUNK_PREFIX, spec.stem_channels)?;
        let plan = plan_blocks(config);
        let shared_stride = config.branches[0].final_stage_stride;

        let mut trunk = Vec::new();
        let mut tail = Vec::new();
        for block in plan {
            if block.landmark <= config.split_after {
                let stride = block.stride.unwrap_or(shared_stride);
                let scope = Scope::new(TRUNK_PREFIX, &block.logical());
                trunk.push(Bottleneck::new(&store, &scope, block.c_in, block.width, block.c_out, stride)?);
            } else {
                tail.push(block);
            }
        }

        let z_dim = spec.out_channels();
        let mut branches = Vec::new();
        for bc in &config.branches {
            let prefix = format!("branch.{}", bc.name);
            let blocks = tail
                .iter()
                .map(|block| {
                    let stride = block.stride.unwrap_or(bc.final_stage_stride);
                    let scope = Scope::new(&prefix, &block.logical());
                    Bottleneck::new(&store, &scope, block.c_in, block.width, block.c_out, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            let reduction = |tag: &str| {
                Reduction::new(&store, &Scope::new("", &format!("{prefix}.reduce_{tag}")), z_dim, bc.reduced_dim)
            };
            let global_reduction = reduction("g")?;
            let part_reductions = if bc.num_parts > 1 {
                (1..=bc.num_parts)
                    .map(|i| reduction(&format!("p{i}")))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            branches.push(Branch {
                config: bc.clone(),
                blocks,
                global_reduction,
                part_reductions,
            });
        }

        Ok(Mgn {
            config: config.clone(),
            store,
            stem,
            trunk,
            branches,
            heads: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Features produced for every image, in a stable order.
    pub fn feature_ids(&self) -> Vec<FeatureId> {
        let mut out = Vec::new();
        for b in &self.config.branches {
            out.push(FeatureId::new(&b.name, FeatureKind::GlobalRaw));
            out.push(FeatureId::new(&b.name, FeatureKind::GlobalReduced));
            if b.num_parts > 1 {
                out.extend((1..=b.num_parts).map(|i| FeatureId::new(&b.name, FeatureKind::Part(i))));
            }
        }
        out
    }

    /// Dimensionality of a feature, or `None` if the model does not produce it.
    pub fn feature_dim(&self, id: &FeatureId) -> Option<usize> {
        let b = self.config.branch(&id.branch)?;
        match id.kind {
            FeatureKind::GlobalRaw => Some(self.config.spec().out_channels()),
            FeatureKind::GlobalReduced => Some(b.reduced_dim),
            FeatureKind::Part(i) if b.num_parts > 1 && (1..=b.num_parts).contains(&i) => Some(b.reduced_dim),
            FeatureKind::Part(_) => None,
        }
    }

    /// Creates one independent bias-free classifier per target feature.
    pub fn attach_heads(&mut self, targets: &[FeatureId], num_classes: usize) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        for id in targets {
            let dim = self
                .feature_dim(id)
                .ok_or_else(|| Error::Config(format!("model has no feature `{id}` for a classifier")))?;
            if self.heads.contains_key(id) {
                continue;
            }
            let name = format!("head.{}.{}.weight", id.branch, id.kind_tag());
            let var = self.store.create(
                &name,
                &name,
                &[num_classes, dim],
                ParamKind::Weight,
                Init::Normal(HEAD_INIT_STD),
            )?;
            self.heads.insert(id.clone(), ClassifierHead::new(var)?);
        }
        self.config.num_classes = Some(num_classes);
        Ok(())
    }

    pub fn heads(&self) -> &BTreeMap<FeatureId, ClassifierHead> {
        &self.heads
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        match images.dims() {
            [n, 3, ih, iw] if *n > 0 && *ih == h && *iw == w => Ok(()),
            dims => Err(Error::Shape(format!(
                "expected images [N, 3, {h}, {w}], got {dims:?}"
            ))),
        }
    }

    /// Runs the network on `[N, 3, H, W]` images. With `train` set, batch
    /// norms use batch statistics and update their running estimates.
    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<EmbeddingBundle> {
        self.check_input(images)?;
        let x = images.to_device(self.device())?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.stem.forward(&x, train)?;
        for block in &self.trunk {
            x = block.forward(&x, train)?;
        }
        let mut out = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut map = x.clone();
            for block in &branch.blocks {
                map = block.forward(&map, train)?;
            }
            let z_g = ops::global_max_pool(&map)?;
            let f_g = branch.global_reduction.forward(&z_g, train)?;
            let parts = if branch.config.num_parts > 1 {
                stripes_along(&map, branch.config.num_parts, 1)?
                    .iter()
                    .zip(&branch.part_reductions)
                    .map(|(stripe, red)| red.forward(&ops::global_max_pool(stripe)?, train))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            out.push(BranchEmbedding {
                name: branch.config.name.clone(),
                z_g,
                f_g,
                parts,
                map,
            });
        }
        Ok(EmbeddingBundle { branches: out })
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, images: &Tensor) -> Result<EmbeddingBundle> {
        self.forward_t(images, false)
    }
}

fn stripes_along(map: &Tensor, num_parts: usize, dim: usize) -> Result<Vec<Tensor>> {
    let size = map.dim(dim)?;
    if num_parts == 0 || size % num_parts != 0 {
        return Err(Error::Shape(format!(
            "cannot split size {size} into {num_parts} equal stripes"
        )));
    }
    let step = size / num_parts;
    (0..num_parts)
        .map(|i| Ok(map.narrow(dim, i * step, step)?))
        .collect()
}

/// Splits an `[N, C, H, W]` map into `num_parts` equal horizontal stripes,
/// top to bottom.
pub fn partition_stripes(feature_map: &Tensor, num_parts: usize) -> Result<Vec<Tensor>> {
    if feature_map.rank() != 4 {
        return Err(Error::Shape(format!(
            "expected [N, C, H, W], got {:?}",
            feature_map.dims()
        )));
    }
    stripes_along(feature_map, num_parts, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::BranchConfig;

    fn tiny(branches: Vec<BranchConfig>) -> ModelConfig {
        ModelConfig {
            input_size: (96, 32),
            ..ModelConfig::tiny().with_branches(branches)
        }
    }

    fn images(n: usize, (h, w): (usize, usize)) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * h * w).map(|i| ((i * 7919) % 251) as f32 / 125.0 - 1.0).collect();
        Tensor::from_vec(data, (n, 3, h, w), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn stripes_tile_the_map() {
        let map = Tensor::arange(0f32, 2.0 * 3.0 * 24.0 * 8.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 24, 8))
            .unwrap();
        let three = partition_stripes(&map, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(three.iter().all(|s| s.dims() == [2, 3, 8, 8]));
        let one = partition_stripes(&map, 1).unwrap();
        assert_eq!(values(&one[0]), values(&map));
        let two = partition_stripes(&map, 2).unwrap();
        assert_eq!(values(&Tensor::cat(&two, 2).unwrap()), values(&map));
        assert!(matches!(partition_stripes(&map, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn global_only_config_has_two_features() {
        let model = build_model(&tiny(vec![BranchConfig::global()])).unwrap();
        let ids: Vec<String> = model.feature_ids().iter().map(|f| f.to_string()).collect();
        assert_eq!(ids, vec!["z_g@global", "f_g@global"]);
        let bundle = model.forward(&images(2, (96, 32))).unwrap();
        assert_eq!(bundle.all().len(), 2);
    }

    #[test]
    fn tiny_shapes_follow_the_stage_walk() {
        let cfg = ModelConfig::tiny();
        let model = build_model(&cfg).unwrap();
        let bundle = model.forward(&images(1, (384, 128))).unwrap();
        assert_eq!(bundle.reduced().len(), 8);
        for b in &bundle.branches {
            assert_eq!(b.z_g.dims(), &[1, 256]);
            let want = if b.name == "global" { [1, 12, 4, 256] } else { [1, 24, 8, 256] };
            assert_eq!(b.map.dims(), &want);
        }
        assert_eq!(bundle.concat().unwrap().dims(), &[1, 2048]);
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let model = build_model(&tiny(vec![BranchConfig::global()])).unwrap();
        let err = model.forward(&images(1, (64, 32))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn branches_start_identical_on_stride_one() {
        let mut g = BranchConfig::global();
        g.final_stage_stride = 1;
        let model = build_model(&tiny(vec![g, BranchConfig::part(2), BranchConfig::part(3)])).unwrap();
        let bundle = model.forward(&images(2, (96, 32))).unwrap();
        let z0 = values(&bundle.branches[0].z_g);
        for b in &bundle.branches[1..] {
            assert_eq!(values(&b.z_g), z0);
        }
        // reductions are independent
        assert_ne!(values(&bundle.branches[0].f_g), values(&bundle.branches[1].f_g));
    }

    #[test]
    fn perturbing_one_branch_leaves_others_unchanged() {
        let model = build_model(&tiny(vec![
            BranchConfig::global(),
            BranchConfig::part(2),
            BranchConfig::part(3),
        ]))
        .unwrap();
        let x = images(2, (96, 32));
        let before = model.forward(&x).unwrap();
        for (name, p) in model.params().all() {
            if name.starts_with("branch.part2.") && p.kind != ParamKind::Buffer {
                p.var.set(&(p.var.as_tensor() * 1.5).unwrap()).unwrap();
            }
        }
        let after = model.forward(&x).unwrap();
        for (a, b) in before.all().into_iter().zip(after.all()) {
            let changed = values(a.1) != values(b.1);
            assert_eq!(changed, a.0.branch == "part2", "{}", a.0);
        }
    }

    #[test]
    fn pooled_values_are_stripe_maxima() {
        let model = build_model(&tiny(vec![BranchConfig::part(3)])).unwrap();
        let bundle = model.forward(&images(1, (96, 32))).unwrap();
        let b = &bundle.branches[0];
        let (_, h, w, c) = b.map.dims4().unwrap();
        let map = values(&b.map);
        let z = values(&b.z_g);
        for ch in 0..c {
            let max = (0..h * w).map(|i| map[i * c + ch]).fold(f32::MIN, f32::max);
            assert_eq!(z[ch], max);
        }
    }

    #[test]
    fn identical_images_identical_bundles() {
        let model = build_model(&tiny(vec![BranchConfig::global(), BranchConfig::part(2)])).unwrap();
        let one = images(1, (96, 32));
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let f = values(&model.forward(&two).unwrap().concat().unwrap());
        let d = f.len() / 2;
        assert_eq!(f[..d], f[d..]);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn heads_are_independent_and_validated() {
        let mut model = build_model(&tiny(vec![BranchConfig::global(), BranchConfig::part(2)])).unwrap();
        let ids = model.feature_ids();
        model.attach_heads(&ids, 5).unwrap();
        assert_eq!(model.heads().len(), ids.len());
        let w: Vec<Vec<f32>> = model.heads().values().map(|h| values(h.weight())).collect();
        assert_ne!(w[0][..5], w[1][..5]);
        let err = model
            .attach_heads(&[FeatureId::new("part9", FeatureKind::GlobalRaw)], 5)
            .unwrap_err();
        assert!(err.is_config());
    }
}
