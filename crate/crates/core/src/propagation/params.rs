use rand::Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::kge::KgeParams;
use crate::numcore::{Graph, NodeId, Tensor, LEAKY_SLOPE};

/// Which meta learner owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    /// Embedding projection `W_e`, `b`.
    Phi,
    /// Attention and gate: `W_r`, `W_c`, `W_k` per layer.
    Omega,
    /// Aggregation: `W₁`, `W₂` per layer.
    Gamma,
    /// Pretrained entity and relation rows.
    Base,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Width of the pretrained rows.
    pub d_p: usize,
    pub d_e: usize,
    /// Output width of each propagation layer.
    pub layers: Vec<usize>,
    pub slope: f64,
}

impl ModelConfig {
    pub fn new(n_entities: usize, n_relations: usize, d_p: usize, d_e: usize, layers: Vec<usize>) -> Self {
        Self {
            n_entities,
            n_relations,
            d_p,
            d_e,
            layers,
            slope: LEAKY_SLOPE,
        }
    }

    /// Input width of layer `l` (0-based).
    pub fn d_in(&self, l: usize) -> usize {
        if l == 0 {
            self.d_e
        } else {
            self.layers[l - 1]
        }
    }

    /// Width of the concatenated prediction vector.
    pub fn repr_dim(&self) -> usize {
        self.layers.iter().sum()
    }
}

/// θ = (φ, ω, γ) plus the base tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBundle {
    pub cfg: ModelConfig,
    pub base_entity: Tensor,
    pub base_relation: Tensor,
    pub w_e: Tensor,
    pub b: Tensor,
    pub w_r: Vec<Tensor>,
    pub w_c: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w1: Vec<Tensor>,
    pub w2: Vec<Tensor>,
}

impl ParamBundle {
    /// Xavier initialisation. When `kge` is given its tables become the base
    /// rows, and its projections seed the first layer's `W_r` if the widths
    /// agree.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, kge: Option<&KgeParams>, rng: &mut R) -> Result<Self> {
        if cfg.layers.is_empty() {
            return Err(Error::Config("at least one propagation layer is required".into()));
        }
        let (base_entity, base_relation) = match kge {
            Some(k) => {
                if k.n_entities() != cfg.n_entities || k.n_relations() != cfg.n_relations || k.dim() != cfg.d_p {
                    return Err(Error::Config(format!(
                        "pretrained tables are {}x{} / {} relations, model expects {}x{} / {}",
                        k.n_entities(),
                        k.dim(),
                        k.n_relations(),
                        cfg.n_entities,
                        cfg.d_p,
                        cfg.n_relations
                    )));
                }
                (k.entity.clone(), k.relation.clone())
            }
            None => (
                Tensor::xavier(&[cfg.n_entities, cfg.d_p], rng),
                Tensor::xavier(&[cfg.n_relations, cfg.d_p], rng),
            ),
        };
        let w_e = Tensor::xavier(&[cfg.d_e, cfg.d_p], rng);
        let b = Tensor::zeros(&[cfg.d_e]);
        let (mut w_r, mut w_c, mut w_k, mut w1, mut w2) = (vec![], vec![], vec![], vec![], vec![]);
        for (l, &d_out) in cfg.layers.iter().enumerate() {
            let d_in = cfg.d_in(l);
            let r = match kge {
                Some(k) if l == 0 && cfg.d_p == cfg.d_e => k.projection.clone(),
                _ => Tensor::xavier(&[cfg.n_relations, cfg.d_e, d_in], rng),
            };
            w_r.push(r);
            w_c.push(Tensor::xavier(&[d_in, d_in], rng));
            w_k.push(Tensor::xavier(&[d_in, d_in], rng));
            w1.push(Tensor::xavier(&[d_out, d_in], rng));
            w2.push(Tensor::xavier(&[d_out, d_in], rng));
        }
        Ok(Self {
            cfg,
            base_entity,
            base_relation,
            w_e,
            b,
            w_r,
            w_c,
            w_k,
            w1,
            w2,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.layers.len()
    }

    /// Every tensor with its name and partition, in canonical order.
    pub fn entries(&self) -> Vec<(String, Partition, &Tensor)> {
        let mut out = vec![
            ("base.entity".to_string(), Partition::Base, &self.base_entity),
            ("base.relation".to_string(), Partition::Base, &self.base_relation),
            ("phi.w_e".to_string(), Partition::Phi, &self.w_e),
            ("phi.b".to_string(), Partition::Phi, &self.b),
        ];
        for l in 0..self.n_layers() {
            out.push((format!("omega.w_r.{l}"), Partition::Omega, &self.w_r[l]));
            out.push((format!("omega.w_c.{l}"), Partition::Omega, &self.w_c[l]));
            out.push((format!("omega.w_k.{l}"), Partition::Omega, &self.w_k[l]));
        }
        for l in 0..self.n_layers() {
            out.push((format!("gamma.w1.{l}"), Partition::Gamma, &self.w1[l]));
            out.push((format!("gamma.w2.{l}"), Partition::Gamma, &self.w2[l]));
        }
        out
    }

    /// Mutable tensors in the same order as [`ParamBundle::entries`].
    pub fn tensors_mut(&mut self) -> Vec<(Partition, &mut Tensor)> {
        let mut out = vec![
            (Partition::Base, &mut self.base_entity),
            (Partition::Base, &mut self.base_relation),
            (Partition::Phi, &mut self.w_e),
            (Partition::Phi, &mut self.b),
        ];
        for ((r, c), k) in self.w_r.iter_mut().zip(&mut self.w_c).zip(&mut self.w_k) {
            out.push((Partition::Omega, r));
            out.push((Partition::Omega, c));
            out.push((Partition::Omega, k));
        }
        for (a, b) in self.w1.iter_mut().zip(&mut self.w2) {
            out.push((Partition::Gamma, a));
            out.push((Partition::Gamma, b));
        }
        out
    }

    pub fn partition_tensors(&self, p: Partition) -> Vec<&Tensor> {
        self.entries().into_iter().filter(|e| e.1 == p).map(|e| e.2).collect()
    }

    /// The γ partition as owned tensors, in canonical order.
    pub fn gamma(&self) -> Vec<Tensor> {
        self.partition_tensors(Partition::Gamma).into_iter().cloned().collect()
    }

    pub fn set_gamma(&mut self, gamma: Vec<Tensor>) {
        assert_eq!(gamma.len(), 2 * self.n_layers());
        let mut it = gamma.into_iter();
        for l in 0..self.n_layers() {
            self.w1[l] = it.next().unwrap();
            self.w2[l] = it.next().unwrap();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|e| e.2.is_finite())
    }

    /// Graph leaves for every tensor; partitions for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Partition) -> bool) -> ModelNodes {
        let ids = self
            .entries()
            .into_iter()
            .map(|(_, p, t)| {
                if trainable(p) {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ModelNodes {
            ids,
            n_layers: self.n_layers(),
        }
    }

    pub fn to_archive(&self, a: &mut Archive) {
        let c = &self.cfg;
        a.set_meta("model.n_entities", c.n_entities);
        a.set_meta("model.n_relations", c.n_relations);
        a.set_meta("model.d_p", c.d_p);
        a.set_meta("model.d_e", c.d_e);
        a.set_meta(
            "model.layers",
            c.layers.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        a.set_meta("model.slope", format!("{:?}", c.slope));
        for (name, _, t) in self.entries() {
            a.insert(&name, t.clone());
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let layers = a
            .meta("model.layers")?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad layer width `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ModelConfig::new(
            a.meta_parse("model.n_entities")?,
            a.meta_parse("model.n_relations")?,
            a.meta_parse("model.d_p")?,
            a.meta_parse("model.d_e")?,
            layers,
        );
        cfg.slope = a.meta_parse("model.slope")?;
        let n = cfg.layers.len();
        let get = |name: &str| a.table(name).cloned();
        let per_layer = |prefix: &str| (0..n).map(|l| get(&format!("{prefix}.{l}"))).collect::<Result<Vec<_>>>();
        let p = Self {
            base_entity: get("base.entity")?,
            base_relation: get("base.relation")?,
            w_e: get("phi.w_e")?,
            b: get("phi.b")?,
            w_r: per_layer("omega.w_r")?,
            w_c: per_layer("omega.w_c")?,
            w_k: per_layer("omega.w_k")?,
            w1: per_layer("gamma.w1")?,
            w2: per_layer("gamma.w2")?,
            cfg,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.cfg;
        let mut expected = vec![
            vec![c.n_entities, c.d_p],
            vec![c.n_relations, c.d_p],
            vec![c.d_e, c.d_p],
            vec![c.d_e],
        ];
        for l in 0..c.layers.len() {
            let d = c.d_in(l);
            expected.push(vec![c.n_relations, c.d_e, d]);
            expected.push(vec![d, d]);
            expected.push(vec![d, d]);
        }
        for l in 0..c.layers.len() {
            expected.push(vec![c.layers[l], c.d_in(l)]);
            expected.push(vec![c.layers[l], c.d_in(l)]);
        }
        for ((name, _, t), shape) in self.entries().into_iter().zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph nodes bound to a [`ParamBundle`], in canonical order.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub ids: Vec<NodeId>,
    n_layers: usize,
}

/// Per-layer nodes.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub w_r: NodeId,
    pub w_c: NodeId,
    pub w_k: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
}

impl ModelNodes {
    /// Wraps node ids already laid out in canonical order.
    pub fn from_ids(ids: Vec<NodeId>, n_layers: usize) -> Self {
        assert_eq!(ids.len(), 4 + 5 * n_layers, "wrong number of parameter nodes");
        Self { ids, n_layers }
    }

    pub fn base_entity(&self) -> NodeId {
        self.ids[0]
    }

    pub fn base_relation(&self) -> NodeId {
        self.ids[1]
    }

    pub fn w_e(&self) -> NodeId {
        self.ids[2]
    }

    pub fn b(&self) -> NodeId {
        self.ids[3]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn layer(&self, l: usize) -> LayerNodes {
        let o = 4 + 3 * l;
        let gm = 4 + 3 * self.n_layers + 2 * l;
        LayerNodes {
            w_r: self.ids[o],
            w_c: self.ids[o + 1],
            w_k: self.ids[o + 2],
            w1: self.ids[gm],
            w2: self.ids[gm + 1],
        }
    }

    /// γ nodes in canonical order.
    pub fn gamma(&self) -> &[NodeId] {
        &self.ids[4 + 3 * self.n_layers..]
    }
}
