//! Trainable networks: per-view two-layer encoders, projection heads, and the
//! cross-attention block.
//!
//! Parameters live in a flat, named list ([`ModelParams`]) so the optimizer
//! and checkpoint code can treat them uniformly; [`Bound`] maps that list onto
//! graph variables for one forward/backward pass.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::PortableRng;
use crate::diffengine::{Graph, Matrix, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// One projection head per view (contrastive regularizers).
    PerView,
    /// A single head shared by all views (non-contrastive regularizers).
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dim: usize,
    pub projection: ProjectionMode,
    /// Side of the n × n cross-attention matrix; `None` builds no attention.
    pub attention_samples: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dim: 32,
            projection: ProjectionMode::PerView,
            attention_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Whether weight decay applies (weights yes, biases no).
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoders: Vec<[Dense; 2]>,
    projections: Vec<Dense>,
    attention: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
    layout: Layout,
    config: ModelConfig,
    view_dims: Vec<usize>,
}

fn glorot(rng: &mut PortableRng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_fn((fan_in, fan_out), |_| (2.0 * rng.uniform() - 1.0) * limit)
}

/// Builds freshly initialized parameters: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(view_dims: &[usize], cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    if cfg.hidden == 0 || cfg.dim == 0 {
        return Err(Error::Domain("hidden and latent widths must be at least 1".into()));
    }
    if view_dims.is_empty() {
        return Err(Error::Domain("model needs at least one view".into()));
    }
    let mut rng = PortableRng::new(seed);
    let mut params = Vec::new();
    let mut push = |name: String, value: Matrix, decay: bool| {
        params.push(Param { name, value, decay });
        params.len() - 1
    };
    let dense = |rng: &mut PortableRng,
                 push: &mut dyn FnMut(String, Matrix, bool) -> usize,
                 name: &str,
                 fi: usize,
                 fo: usize| Dense {
        weight: push(format!("{name}.weight"), glorot(rng, fi, fo), true),
        bias: push(format!("{name}.bias"), Matrix::zeros((1, fo)), false),
    };

    let mut encoders = Vec::new();
    for (v, &d) in view_dims.iter().enumerate() {
        let l1 = dense(&mut rng, &mut push, &format!("enc{v}.l1"), d, cfg.hidden);
        let l2 = dense(&mut rng, &mut push, &format!("enc{v}.l2"), cfg.hidden, cfg.dim);
        encoders.push([l1, l2]);
    }
    let projections = match cfg.projection {
        ProjectionMode::PerView => (0..view_dims.len())
            .map(|v| dense(&mut rng, &mut push, &format!("proj{v}"), cfg.dim, cfg.dim))
            .collect(),
        ProjectionMode::Shared => vec![dense(&mut rng, &mut push, "proj", cfg.dim, cfg.dim)],
    };
    let attention = match cfg.attention_samples {
        Some(n) => {
            if view_dims.len() != 2 {
                return Err(Error::Contract(
                    "cross-attention is defined for exactly two views".into(),
                ));
            }
            Some([
                push("attn.wc".into(), glorot(&mut rng, n, n), true),
                push("attn.w1".into(), glorot(&mut rng, cfg.dim, cfg.dim), true),
                push("attn.w2".into(), glorot(&mut rng, cfg.dim, cfg.dim), true),
            ])
        }
        None => None,
    };
    Ok(ModelParams {
        params,
        layout: Layout {
            encoders,
            projections,
            attention,
        },
        config: *cfg,
        view_dims: view_dims.to_vec(),
    })
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn view_dims(&self) -> &[usize] {
        &self.view_dims
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces a named parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        if p.value.dim() != value.dim() {
            return Err(Error::shape("set_param", p.value.dim(), value.dim()));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_projections(&self) -> usize {
        self.layout.projections.len()
    }

    pub fn has_attention(&self) -> bool {
        self.layout.attention.is_some()
    }

    /// Index of the projection head used by view `v`.
    pub fn projection_index(&self, v: usize) -> usize {
        match self.config.projection {
            ProjectionMode::PerView => v,
            ProjectionMode::Shared => 0,
        }
    }

    /// Inserts copies of all parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        self.bound(vars)
    }

    /// Inserts parameters without copying; the values must be handed back
    /// with [`ModelParams::restore`].
    pub fn bind_owned(&mut self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter_mut()
            .map(|p| g.param(std::mem::take(&mut p.value)))
            .collect();
        self.bound(vars)
    }

    /// Moves values back from the graph and returns their gradients.
    pub fn restore(&mut self, g: &mut Graph, bound: &Bound) -> Vec<Matrix> {
        self.params
            .iter_mut()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                let (value, grad) = g.take_param(v);
                p.value = value;
                grad
            })
            .collect()
    }

    /// Maps graph variables, one per parameter in order, onto the layout.
    pub fn bound(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        Bound {
            vars,
            layout: self.layout.clone(),
            projection: self.config.projection,
        }
    }

    /// Encodes one view outside any training graph.
    pub fn encode_values(&self, view: usize, x: &Matrix) -> Result<Matrix> {
        let enc = self
            .layout
            .encoders
            .get(view)
            .ok_or_else(|| Error::Contract(format!("no encoder for view {view}")))?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let [l1, l2] = enc;
        let w = [l1.weight, l1.bias, l2.weight, l2.bias].map(|i| g.constant(self.params[i].value.clone()));
        let z = encoder_forward(&mut g, xv, w)?;
        Ok(g.value(z).clone())
    }

    /// Writes the parameters as text: a header with the architecture, then
    /// one `name rows cols decay` line per matrix followed by its rows.
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let dims: Vec<String> = self.view_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            out,
            "fairmvc-params 1 views={} hidden={} dim={} projection={} attention={}",
            dims.join(","),
            self.config.hidden,
            self.config.dim,
            match self.config.projection {
                ProjectionMode::PerView => "per-view",
                ProjectionMode::Shared => "shared",
            },
            self.config
                .attention_samples
                .map_or("none".to_string(), |n| n.to_string())
        );
        for p in &self.params {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                p.name,
                p.value.nrows(),
                p.value.ncols(),
                u8::from(p.decay)
            );
            for row in p.value.outer_iter() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Parse {
            row: line + 1,
            column: "checkpoint".into(),
            message: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty checkpoint"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("fairmvc-params") || fields.next() != Some("1") {
            return Err(bad(0, "not a version 1 parameter checkpoint"));
        }
        let mut cfg = ModelConfig::default();
        let mut view_dims = Vec::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(0, "malformed header field"))?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(0, "malformed number"));
            match k {
                "views" => view_dims = v.split(',').map(num).collect::<Result<_>>()?,
                "hidden" => cfg.hidden = num(v)?,
                "dim" => cfg.dim = num(v)?,
                "projection" => {
                    cfg.projection = match v {
                        "per-view" => ProjectionMode::PerView,
                        "shared" => ProjectionMode::Shared,
                        _ => return Err(bad(0, "unknown projection mode")),
                    }
                }
                "attention" => cfg.attention_samples = if v == "none" { None } else { Some(num(v)?) },
                _ => return Err(bad(0, "unknown header field")),
            }
        }
        let mut model = init_params(&view_dims, &cfg, 0)?;
        for p in &mut model.params {
            let (ln, meta) = lines
                .next()
                .ok_or_else(|| bad(usize::MAX - 1, "truncated checkpoint"))?;
            let parts: Vec<&str> = meta.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != p.name {
                return Err(bad(ln, &format!("expected parameter `{}`", p.name)));
            }
            let rows: usize = parts[1].parse().map_err(|_| bad(ln, "bad row count"))?;
            let cols: usize = parts[2].parse().map_err(|_| bad(ln, "bad column count"))?;
            if (rows, cols) != p.value.dim() {
                return Err(bad(ln, "shape does not match architecture"));
            }
            p.decay = parts[3] == "1";
            for r in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, "truncated matrix"))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| bad(ln, "bad number")))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(bad(ln, "wrong number of columns"));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    p.value[[r, c]] = v;
                }
            }
        }
        Ok(model)
    }
}

/// Parameters of a [`ModelParams`] as graph variables.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    layout: Layout,
    projection: ProjectionMode,
}

/// Intermediates of the cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// d × d cross-view feature relatedness.
    pub relatedness: Var,
    pub pre: [Var; 2],
    pub weights: [Var; 2],
    pub out: [Var; 2],
}

fn encoder_forward(g: &mut Graph, x: Var, w: [Var; 4]) -> Result<Var> {
    let a = g.matmul(x, w[0])?;
    let a = g.add_row(a, w[1])?;
    let a = g.relu(a);
    let z = g.matmul(a, w[2])?;
    g.add_row(z, w[3])
}

impl Bound {
    /// `Z = relu(X W₁ + b₁) W₂ + b₂`.
    pub fn encode(&self, g: &mut Graph, view: usize, x: Var) -> Result<Var> {
        let [l1, l2] = self
            .layout
            .encoders
            .get(view)
            .ok_or_else(|| Error::Contract(format!("no encoder for view {view}")))?;
        let w = [l1.weight, l1.bias, l2.weight, l2.bias].map(|i| self.vars[i]);
        encoder_forward(g, x, w)
    }

    /// `H = relu(Z W + b)` with the head belonging to `view`.
    pub fn project(&self, g: &mut Graph, view: usize, z: Var) -> Result<Var> {
        let idx = match self.projection {
            ProjectionMode::PerView => view,
            ProjectionMode::Shared => 0,
        };
        let head = self
            .layout
            .projections
            .get(idx)
            .ok_or_else(|| Error::Contract(format!("no projection head for view {view}")))?;
        let h = g.matmul(z, self.vars[head.weight])?;
        let h = g.add_row(h, self.vars[head.bias])?;
        Ok(g.relu(h))
    }

    /// Variable of the projection weight used by `view`.
    pub fn projection_weight(&self, view: usize) -> Option<Var> {
        let idx = match self.projection {
            ProjectionMode::PerView => view,
            ProjectionMode::Shared => 0,
        };
        self.layout.projections.get(idx).map(|d| self.vars[d.weight])
    }

    /// `(W_c, W₁, W₂)` when the model has an attention block.
    pub fn attention_vars(&self) -> Option<[Var; 3]> {
        self.layout.attention.map(|ix| ix.map(|i| self.vars[i]))
    }

    /// ```text
    /// C  = H¹ᵀ W_c H²
    /// O¹ = tanh(Z¹W₁ + Z²W₂C)      O² = tanh(Z²W₂ + Z¹W₁Cᵀ)
    /// A  = row-softmax(O)           T  = H ⊙ A
    /// ```
    pub fn cross_attention(&self, g: &mut Graph, z: [Var; 2], h: [Var; 2]) -> Result<Attention> {
        let [wc, w1, w2] = self
            .attention_vars()
            .ok_or_else(|| Error::Contract("model has no cross-attention parameters".into()))?;
        cross_attention(g, [wc, w1, w2], z, h)
    }
}

/// The attention block over explicit variables `(W_c, W₁, W₂)`.
pub fn cross_attention(g: &mut Graph, w: [Var; 3], z: [Var; 2], h: [Var; 2]) -> Result<Attention> {
    let [wc, w1, w2] = w;
    let side = g.shape(wc).0;
    let n = g.shape(h[1]).0;
    if side != n || g.shape(h[0]).0 != n || g.shape(z[0]).0 != n || g.shape(z[1]).0 != n {
        return Err(Error::Contract(format!(
            "cross-attention was built for {side} samples but received {n}"
        )));
    }
    let wh2 = g.matmul(wc, h[1])?;
    let h1t = g.transpose(h[0]);
    let c = g.matmul(h1t, wh2)?;
    let ct = g.transpose(c);

    let z1w1 = g.matmul(z[0], w1)?;
    let z2w2 = g.matmul(z[1], w2)?;
    let cross1 = g.matmul(z2w2, c)?;
    let cross2 = g.matmul(z1w1, ct)?;
    let o1 = g.add(z1w1, cross1)?;
    let o1 = g.tanh(o1);
    let o2 = g.add(z2w2, cross2)?;
    let o2 = g.tanh(o2);
    let a1 = g.row_softmax(o1)?;
    let a2 = g.row_softmax(o2)?;
    let t1 = g.mul(h[0], a1)?;
    let t2 = g.mul(h[1], a2)?;
    Ok(Attention {
        relatedness: c,
        pre: [o1, o2],
        weights: [a1, a2],
        out: [t1, t2],
    })
}
