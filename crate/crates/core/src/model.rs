//! Network data model: hypercolumn geometry, per-pair parameter state
//! (weights, biases, probability traces), the three-layer network with its
//! plasticity mask, the training configuration, and a bit-exact binary
//! model format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::kernels;
use crate::mat::Mat;
use crate::plasticity::{self, ConnectivityMask};
use crate::precision::{ArithMode, EmArith, F32Arith, F64Arith, FloatFormat, ScalarArith};

const MAGIC: &[u8; 8] = b"BCPNNNET";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("geometry must have positive HCU and MCU counts")]
    InvalidGeometry,
    #[error("fan-in {fan_in} out of range 1..={n_features}")]
    FanInRange { fan_in: usize, n_features: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed model header")]
    MalformedHeader,
    #[error("unsupported model file version {0}")]
    VersionMismatch(u32),
    #[error("truncated model file")]
    Truncated,
    #[error("model file stores {stored} arithmetic, loader expected {expected}")]
    WrongMode { stored: ArithMode, expected: ArithMode },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Partition of a layer into equally sized hypercolumns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HypercolumnGeometry {
    pub n_hcus: usize,
    pub mcus_per_hcu: usize,
}

impl HypercolumnGeometry {
    pub fn new(n_hcus: usize, mcus_per_hcu: usize) -> Result<Self, ModelError> {
        if n_hcus == 0 || mcus_per_hcu == 0 {
            return Err(ModelError::InvalidGeometry);
        }
        Ok(HypercolumnGeometry { n_hcus, mcus_per_hcu })
    }

    pub fn total_units(&self) -> usize {
        self.n_hcus * self.mcus_per_hcu
    }

    /// HCU owning unit `u`.
    pub fn hcu_of(&self, u: usize) -> usize {
        u / self.mcus_per_hcu
    }
}

/// Weights, biases, and probability traces of one layer pair.
/// All traces stay strictly positive (clamped in the update kernels);
/// within each post-HCU, the joint traces of a pre-unit sum to that unit's
/// marginal whenever updates saw per-HCU-normalized activity.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPairState<P: ScalarArith> {
    pub weights: Mat<P::R>,
    pub bias: Vec<P::R>,
    pub trace_ci: Vec<P::R>,
    pub trace_cj: Vec<P::R>,
    pub trace_cij: Mat<P::R>,
}

impl<P: ScalarArith> LayerPairState<P> {
    /// Fresh pair at independence: uniform marginals per HCU, joint traces
    /// as their product, weights and bias derived from the traces (weights
    /// come out exactly zero).
    fn at_independence(
        p: P,
        pre: &HypercolumnGeometry,
        post: &HypercolumnGeometry,
        k_b: f64,
    ) -> Self {
        let (n_pre, n_post) = (pre.total_units(), post.total_units());
        let ci = p.ingest(1.0 / pre.mcus_per_hcu as f64);
        let cj = p.ingest(1.0 / post.mcus_per_hcu as f64);
        let mut state = LayerPairState {
            weights: Mat::zeros(n_pre, n_post),
            bias: vec![P::R::default(); n_post],
            trace_ci: vec![ci; n_pre],
            trace_cj: vec![cj; n_post],
            // The product of the ingested marginals (not a re-rounded
            // constant): the weight rule then sees C_ij/(C_i·C_j) == 1
            // exactly in every format.
            trace_cij: Mat::fill_with(n_pre, n_post, |_, _| p.mul(ci, cj)),
        };
        kernels::update_weights_bias(p, &mut state, k_b)
            .expect("independence traces are positive");
        state
    }
}

/// Hyperparameters of the two-phase batch training loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// EWMA rate of the unsupervised (input→hidden) phase.
    pub lambda_hidden: f64,
    /// EWMA rate of the supervised (hidden→output) phase.
    pub lambda_output: f64,
    /// Bias gain multiplying ln C_j.
    pub k_b: f64,
    /// Unsupervised epochs.
    pub n_epochs1: usize,
    /// Supervised epochs.
    pub n_epochs2: usize,
    /// Trace/weight update iterations per batch.
    pub n_cycles: usize,
    pub batch_size: usize,
    /// Batches between mask updates; defaults to the hidden HCU count.
    pub mask_update_period: Option<usize>,
    /// Active input connections per hidden HCU.
    pub fan_in: usize,
    /// Greedy mask swaps per HCU per update.
    pub swaps_per_hcu: usize,
    /// σ of the seeded Gaussian support noise in the unsupervised phase.
    /// Breaks the exact symmetry between the MCUs of an HCU (which start
    /// from identical zero weights and shared connectivity); absent from
    /// inference and the supervised phase.
    pub support_noise: f64,
    /// Sub-batch groups in the data-parallel mean reduction.
    pub n_workers: usize,
    pub seed: u64,
    pub mode: ArithMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_hidden: 0.01,
            lambda_output: 0.01,
            k_b: 1.0,
            n_epochs1: 3,
            n_epochs2: 3,
            n_cycles: 1,
            batch_size: 256,
            mask_update_period: None,
            fan_in: 128,
            swaps_per_hcu: 1,
            support_noise: 0.1,
            n_workers: 1,
            seed: 1,
            mode: ArithMode::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_features: usize) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        for (name, l) in [("lambda_hidden", self.lambda_hidden), ("lambda_output", self.lambda_output)] {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("{name} = {l} outside [0, 1]"));
            }
        }
        if !self.k_b.is_finite() {
            return bad(format!("k_b = {} not finite", self.k_b));
        }
        if self.fan_in < 1 || self.fan_in > n_features {
            return Err(ModelError::FanInRange { fan_in: self.fan_in, n_features });
        }
        if self.mask_update_period == Some(0) {
            return bad("mask_update_period must be ≥ 1".into());
        }
        if self.n_cycles < 1 {
            return bad("n_cycles must be ≥ 1".into());
        }
        if !(self.support_noise >= 0.0 && self.support_noise.is_finite()) {
            return bad(format!("support_noise = {} not a finite value ≥ 0", self.support_noise));
        }
        if self.n_workers < 1 {
            return bad("n_workers must be ≥ 1".into());
        }
        Ok(())
    }

    /// Mask update cadence with the default applied.
    pub fn mask_period(&self, hidden: &HypercolumnGeometry) -> usize {
        self.mask_update_period.unwrap_or(hidden.n_hcus)
    }
}

/// Three-layer network: probabilistic input, plastic hidden layer, class
/// read-out. The hidden pair carries the connectivity mask; the output pair
/// is dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<P: ScalarArith> {
    pub provider: P,
    pub input: HypercolumnGeometry,
    pub hidden: HypercolumnGeometry,
    pub output: HypercolumnGeometry,
    pub hidden_pair: LayerPairState<P>,
    pub output_pair: LayerPairState<P>,
    pub mask: ConnectivityMask,
}

/// Builds a network with traces at independence and a seeded random mask.
pub fn build_network<P: ScalarArith>(
    p: P,
    input: HypercolumnGeometry,
    hidden: HypercolumnGeometry,
    output: HypercolumnGeometry,
    config: &TrainConfig,
) -> Result<Network<P>, ModelError> {
    for g in [&input, &hidden, &output] {
        if g.n_hcus == 0 || g.mcus_per_hcu == 0 {
            return Err(ModelError::InvalidGeometry);
        }
    }
    let n_features = input.total_units();
    config.validate(n_features)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(plasticity::MASK_STREAM);
    let mask = plasticity::init_mask(&mut rng, n_features, hidden.n_hcus, config.fan_in)
        .map_err(|_| ModelError::FanInRange { fan_in: config.fan_in, n_features })?;

    let mut hidden_pair = LayerPairState::at_independence(p, &input, &hidden, config.k_b);
    kernels::apply_mask(p, &mut hidden_pair, &mask, &hidden)
        .expect("mask dimensions are constructed to match");
    let output_pair = LayerPairState::at_independence(p, &hidden, &output, config.k_b);

    Ok(Network { provider: p, input, hidden, output, hidden_pair, output_pair, mask })
}

/// Incremental front end mirroring a layer-stacking model API:
/// input geometry, one plastic hidden layer, one dense read-out.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    input: Option<HypercolumnGeometry>,
    hidden: Option<HypercolumnGeometry>,
    output: Option<HypercolumnGeometry>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(mut self, geom: HypercolumnGeometry) -> Self {
        self.input = Some(geom);
        self
    }

    /// Hidden layer trained unsupervised under the structural-plasticity
    /// mask.
    pub fn hidden_plastic(mut self, geom: HypercolumnGeometry) -> Self {
        self.hidden = Some(geom);
        self
    }

    /// Supervised class read-out (single HCU, one MCU per class).
    pub fn output(mut self, geom: HypercolumnGeometry) -> Self {
        self.output = Some(geom);
        self
    }

    pub fn build<P: ScalarArith>(self, p: P, config: &TrainConfig) -> Result<Network<P>, ModelError> {
        let missing = |what: &str| ModelError::InvalidConfig(format!("builder: {what} layer not set"));
        build_network(
            p,
            self.input.ok_or_else(|| missing("input"))?,
            self.hidden.ok_or_else(|| missing("hidden"))?,
            self.output.ok_or_else(|| missing("output"))?,
            config,
        )
    }
}

impl<P: ScalarArith> Network<P> {
    pub fn builder() -> NetworkBuilder {
        NetworkBuilder::new()
    }

    pub fn mode(&self) -> ArithMode {
        self.provider.mode()
    }

    /// Serializes to the versioned binary format. All values are written as
    /// little-endian f64; every provider representation widens exactly, so
    /// round trips are bit-exact.
    pub fn serialize(&self) -> Vec<u8> {
        let p = self.provider;
        let mut out = Vec::with_capacity(64 + 8 * (self.hidden_pair.trace_cij.as_slice().len() * 2));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        let (tag, mant): (u8, u8) = match self.mode() {
            ArithMode::F64 => (0, 0),
            ArithMode::F32 => (1, 0),
            ArithMode::Reduced(f) => (2, f.mantissa_bits() as u8),
        };
        out.push(tag);
        out.push(mant);
        out.extend_from_slice(&[0u8, 0u8]);
        for g in [&self.input, &self.hidden, &self.output] {
            out.extend_from_slice(&(g.n_hcus as u64).to_le_bytes());
            out.extend_from_slice(&(g.mcus_per_hcu as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.mask.fan_in() as u64).to_le_bytes());
        for pair in [&self.hidden_pair, &self.output_pair] {
            for &w in pair.weights.as_slice() {
                out.extend_from_slice(&p.emit(w).to_le_bytes());
            }
            for &b in &pair.bias {
                out.extend_from_slice(&p.emit(b).to_le_bytes());
            }
            for &c in &pair.trace_ci {
                out.extend_from_slice(&p.emit(c).to_le_bytes());
            }
            for &c in &pair.trace_cj {
                out.extend_from_slice(&p.emit(c).to_le_bytes());
            }
            for &c in pair.trace_cij.as_slice() {
                out.extend_from_slice(&p.emit(c).to_le_bytes());
            }
        }
        for i in 0..self.mask.n_features() {
            for h in 0..self.mask.n_hcus() {
                out.push(self.mask.is_active(i, h) as u8);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Reads a model written by [`Network::serialize`]; the stored
    /// arithmetic mode must match the provider's.
    pub fn deserialize(bytes: &[u8], p: P) -> Result<Self, ModelError> {
        let (mode, rest) = parse_header(bytes)?;
        if mode != p.mode() {
            return Err(ModelError::WrongMode { stored: mode, expected: p.mode() });
        }
        let mut r = Reader { buf: rest, pos: 0 };
        let input = r.geometry()?;
        let hidden = r.geometry()?;
        let output = r.geometry()?;
        let fan_in = r.u64()? as usize;
        let n_features = input.total_units();
        if fan_in < 1 || fan_in > n_features {
            return Err(ModelError::MalformedHeader);
        }
        let hidden_pair = r.pair(p, n_features, hidden.total_units())?;
        let output_pair = r.pair(p, hidden.total_units(), output.total_units())?;
        let mut flags = Vec::with_capacity(n_features * hidden.n_hcus);
        for _ in 0..n_features * hidden.n_hcus {
            match r.byte()? {
                0 => flags.push(false),
                1 => flags.push(true),
                _ => return Err(ModelError::MalformedHeader),
            }
        }
        if r.pos != r.buf.len() {
            return Err(ModelError::MalformedHeader);
        }
        let mask = ConnectivityMask::from_flags(n_features, hidden.n_hcus, fan_in, flags)
            .map_err(|_| ModelError::MalformedHeader)?;
        Ok(Network { provider: p, input, hidden, output, hidden_pair, output_pair, mask })
    }

    pub fn load(path: impl AsRef<Path>, p: P) -> Result<Self, ModelError> {
        Self::deserialize(&fs::read(path)?, p)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(ArithMode, &[u8]), ModelError> {
    if bytes.len() < 16 {
        return Err(ModelError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(ModelError::MalformedHeader);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FILE_VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    let mode = match (bytes[12], bytes[13]) {
        (0, 0) => ArithMode::F64,
        (1, 0) => ArithMode::F32,
        (2, m) => ArithMode::Reduced(
            FloatFormat::new(m as u32).ok_or(ModelError::MalformedHeader)?,
        ),
        _ => return Err(ModelError::MalformedHeader),
    };
    if bytes[14] != 0 || bytes[15] != 0 {
        return Err(ModelError::MalformedHeader);
    }
    Ok((mode, &bytes[16..]))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn geometry(&mut self) -> Result<HypercolumnGeometry, ModelError> {
        let n_hcus = self.u64()? as usize;
        let mcus = self.u64()? as usize;
        HypercolumnGeometry::new(n_hcus, mcus).map_err(|_| ModelError::MalformedHeader)
    }

    fn vec<P: ScalarArith>(&mut self, p: P, n: usize) -> Result<Vec<P::R>, ModelError> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(p.ingest(self.f64()?));
        }
        Ok(v)
    }

    fn pair<P: ScalarArith>(
        &mut self,
        p: P,
        n_pre: usize,
        n_post: usize,
    ) -> Result<LayerPairState<P>, ModelError> {
        Ok(LayerPairState {
            weights: Mat::from_vec(n_pre, n_post, self.vec(p, n_pre * n_post)?),
            bias: self.vec(p, n_post)?,
            trace_ci: self.vec(p, n_pre)?,
            trace_cj: self.vec(p, n_post)?,
            trace_cij: Mat::from_vec(n_pre, n_post, self.vec(p, n_pre * n_post)?),
        })
    }
}

/// A network of any arithmetic mode, as reconstructed from a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    F64(Network<F64Arith>),
    F32(Network<F32Arith>),
    Reduced(Network<EmArith>),
}

impl AnyNetwork {
    pub fn mode(&self) -> ArithMode {
        match self {
            AnyNetwork::F64(n) => n.mode(),
            AnyNetwork::F32(n) => n.mode(),
            AnyNetwork::Reduced(n) => n.mode(),
        }
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, ModelError> {
        let (mode, _) = parse_header(bytes)?;
        Ok(match mode {
            ArithMode::F64 => AnyNetwork::F64(Network::deserialize(bytes, F64Arith)?),
            ArithMode::F32 => AnyNetwork::F32(Network::deserialize(bytes, F32Arith)?),
            ArithMode::Reduced(f) => {
                AnyNetwork::Reduced(Network::deserialize(bytes, EmArith::new(f))?)
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::deserialize(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig { fan_in: 4, ..TrainConfig::default() }
    }

    fn small_net() -> Network<F64Arith> {
        build_network(
            F64Arith,
            HypercolumnGeometry::new(4, 2).unwrap(),
            HypercolumnGeometry::new(2, 3).unwrap(),
            HypercolumnGeometry::new(1, 2).unwrap(),
            &small_config(),
        )
        .unwrap()
    }

    #[test]
    fn fresh_network_has_zero_weights_everywhere() {
        let net = small_net();
        assert!(net.hidden_pair.weights.as_slice().iter().all(|&w| w == 0.0));
        assert!(net.output_pair.weights.as_slice().iter().all(|&w| w == 0.0));
        // Bias is uniform within each HCU: k_b·ln(1/m).
        let expect = (1.0f64 / 3.0).ln();
        for &b in &net.hidden_pair.bias {
            assert!((b - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_hold_in_every_format() {
        let cfg = small_config();
        for m in [5, 6, 7, 11, 15, 19, 23] {
            let p = EmArith::new(FloatFormat::new(m).unwrap());
            let net = build_network(
                p,
                HypercolumnGeometry::new(4, 2).unwrap(),
                HypercolumnGeometry::new(2, 3).unwrap(),
                HypercolumnGeometry::new(1, 2).unwrap(),
                &cfg,
            )
            .unwrap();
            assert!(
                net.hidden_pair.weights.as_slice().iter().all(|&w| w == 0.0),
                "m = {m}"
            );
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(HypercolumnGeometry::new(0, 2).is_err());
        assert!(HypercolumnGeometry::new(2, 0).is_err());
    }

    #[test]
    fn fan_in_beyond_features_rejected() {
        let cfg = TrainConfig { fan_in: 9, ..TrainConfig::default() };
        let r = build_network(
            F64Arith,
            HypercolumnGeometry::new(4, 2).unwrap(),
            HypercolumnGeometry::new(2, 3).unwrap(),
            HypercolumnGeometry::new(1, 2).unwrap(),
            &cfg,
        );
        assert!(matches!(r, Err(ModelError::FanInRange { fan_in: 9, n_features: 8 })));
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        assert_eq!(small_net(), small_net());
    }

    #[test]
    fn different_seed_changes_the_mask() {
        let a = small_net();
        let cfg = TrainConfig { seed: 99, fan_in: 4, ..TrainConfig::default() };
        let b = build_network(F64Arith, a.input, a.hidden, a.output, &cfg).unwrap();
        assert_ne!(a.mask, b.mask);
    }

    #[test]
    fn serialize_round_trip_is_bit_exact() {
        let net = small_net();
        let bytes = net.serialize();
        let back = Network::deserialize(&bytes, F64Arith).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn round_trip_through_any_network() {
        let net = small_net();
        let any = AnyNetwork::deserialize(&net.serialize()).unwrap();
        assert_eq!(any, AnyNetwork::F64(net));
    }

    #[test]
    fn corrupt_magic_is_malformed_header() {
        let mut bytes = small_net().serialize();
        bytes[0] = b'X';
        assert!(matches!(
            Network::deserialize(&bytes, F64Arith),
            Err(ModelError::MalformedHeader)
        ));
    }

    #[test]
    fn future_version_is_version_mismatch() {
        let mut bytes = small_net().serialize();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Network::deserialize(&bytes, F64Arith),
            Err(ModelError::VersionMismatch(7))
        ));
    }

    #[test]
    fn truncated_payload_is_truncated() {
        let bytes = small_net().serialize();
        assert!(matches!(
            Network::deserialize(&bytes[..bytes.len() - 3], F64Arith),
            Err(ModelError::Truncated)
        ));
        assert!(matches!(
            Network::deserialize(&bytes[..10], F64Arith),
            Err(ModelError::Truncated)
        ));
    }

    #[test]
    fn trailing_garbage_is_malformed() {
        let mut bytes = small_net().serialize();
        bytes.push(0);
        assert!(matches!(
            Network::deserialize(&bytes, F64Arith),
            Err(ModelError::MalformedHeader)
        ));
    }

    #[test]
    fn wrong_mode_is_reported() {
        let bytes = small_net().serialize();
        assert!(matches!(
            Network::deserialize(&bytes, F32Arith),
            Err(ModelError::WrongMode { .. })
        ));
    }

    #[test]
    fn builder_mirrors_direct_construction() {
        let direct = small_net();
        let built = NetworkBuilder::new()
            .input(HypercolumnGeometry::new(4, 2).unwrap())
            .hidden_plastic(HypercolumnGeometry::new(2, 3).unwrap())
            .output(HypercolumnGeometry::new(1, 2).unwrap())
            .build(F64Arith, &small_config())
            .unwrap();
        assert_eq!(direct, built);
    }

    #[test]
    fn builder_missing_layer_errors() {
        let r = NetworkBuilder::new()
            .input(HypercolumnGeometry::new(4, 2).unwrap())
            .build(F64Arith, &TrainConfig::default());
        assert!(matches!(r, Err(ModelError::InvalidConfig(_))));
    }
}
