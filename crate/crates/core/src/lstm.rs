//! Stacked LSTM baseline with a fully connected head applied at every
//! time step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    /// Hidden widths of the ReLU head, followed by a linear readout.
    pub fc_sizes: Vec<usize>,
    pub out_channels: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            input_size: 1,
            hidden_size: 128,
            n_layers: 2,
            fc_sizes: vec![128, 64],
            out_channels: 2,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.input_size, self.hidden_size, self.n_layers, self.out_channels];
        if sizes.contains(&0) || self.fc_sizes.contains(&0) {
            return Err(Error::invalid(format!("LSTM sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let mut n = 0;
        for l in 0..self.n_layers {
            let inp = if l == 0 { self.input_size } else { h };
            n += inp * 4 * h + h * 4 * h + 4 * h;
        }
        let mut fan_in = h;
        for &s in self.fc_sizes.iter().chain(std::iter::once(&self.out_channels)) {
            n += fan_in * s + s;
            fan_in = s;
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub params: ParamStore,
}

impl LstmModel {
    fn build(config: LstmConfig, mut fill: impl FnMut(&[usize], usize) -> Tensor) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut params = ParamStore::new();
        for l in 0..config.n_layers {
            let inp = if l == 0 { config.input_size } else { h };
            params.push(format!("lstm.{l}.w_ih"), fill(&[inp, 4 * h], h));
            params.push(format!("lstm.{l}.w_hh"), fill(&[h, 4 * h], h));
            params.push(format!("lstm.{l}.bias"), fill(&[4 * h], h));
        }
        let mut fan_in = h;
        let n_fc = config.fc_sizes.len();
        for (j, &s) in config.fc_sizes.iter().chain(std::iter::once(&config.out_channels)).enumerate() {
            let name = if j == n_fc { "head.out".to_string() } else { format!("head.{j}") };
            params.push(format!("{name}.weight"), fill(&[fan_in, s], fan_in));
            params.push(format!("{name}.bias"), fill(&[s], fan_in));
            fan_in = s;
        }
        Ok(Self { config, params })
    }

    pub fn zeros(config: LstmConfig) -> Result<Self> {
        Self::build(config, |s, _| Tensor::zeros(s))
    }

    /// Every tensor `U(-1/sqrt(fan), 1/sqrt(fan))` with `fan` the hidden
    /// size for recurrent weights and the input width for the head.
    pub fn init(config: LstmConfig, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::build(config, |s, fan| {
            let a = 1.0 / (fan as f64).sqrt();
            let n = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng::uniform(&mut r, -a, a)).collect()).expect("shape")
        })
    }

    /// `[B, in, T]` to `[B, out, T]`, unrolled from zero states.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, train: bool) -> Result<Var> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::shape("lstm", format!("{} parameters bound, {} expected", params.len(), self.params.len())));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.input_size {
            return Err(Error::shape("lstm", format!("expected [B, {}, T], got {shape:?}", cfg.input_size)));
        }
        let (batch, t_len, h) = (shape[0], shape[2], cfg.hidden_size);
        let zero = g.constant(Tensor::zeros(&[batch, h]));
        let mut hs = vec![zero; cfg.n_layers];
        let mut cs = vec![zero; cfg.n_layers];
        let mut top = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice(x, 2, t, 1)?;
            let mut inp = g.reshape(xt, &[batch, cfg.input_size])?;
            for l in 0..cfg.n_layers {
                let p = &params[3 * l..3 * l + 3];
                let hc = g.lstm_cell(inp, hs[l], cs[l], p[0], p[1], p[2])?;
                hs[l] = g.slice(hc, 1, 0, h)?;
                cs[l] = g.slice(hc, 1, h, h)?;
                inp = hs[l];
            }
            if train && g.value(inp).data().iter().any(|v| v.abs() > 1.0) {
                return Err(Error::invalid(format!("hidden state left [-1, 1] at step {t}")));
            }
            top.push(g.reshape(inp, &[batch, 1, h])?);
        }
        let mut y = g.concat(&top, 1)?;
        let head = &params[3 * cfg.n_layers..];
        let n_fc = cfg.fc_sizes.len();
        for j in 0..=n_fc {
            y = g.matmul(y, head[2 * j])?;
            y = g.add(y, head[2 * j + 1])?;
            if j < n_fc {
                y = g.relu(y);
            }
        }
        g.permute(y, &[0, 2, 1])
    }

    /// One cell update outside any training graph.
    pub fn step(&self, layer: usize, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p: Vec<Var> = (0..3).map(|i| g.constant(self.params.tensor(3 * layer + i).clone())).collect();
        let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
        let hc = g.lstm_cell(xv, hv, cv, p[0], p[1], p[2])?;
        let hid = self.config.hidden_size;
        let hn = g.slice(hc, 1, 0, hid)?;
        let cn = g.slice(hc, 1, hid, hid)?;
        Ok((g.value(hn).clone(), g.value(cn).clone()))
    }
}
