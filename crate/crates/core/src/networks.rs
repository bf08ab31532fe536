//! The untrained encoder-decoder generator and fully connected
//! discriminator used by the neural solvers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::adam::AdamState;
use crate::format::{expect_eof, field, parse_kv, read_f64_block, read_line, write_f64_block};
use crate::hash::fnv1a64;
use crate::layers::LayerSpec;
use crate::rng::{stream, Role};
use crate::tensor::{axpy, dot, Tape, Tensor, TensorRef};
use crate::{Error, Result};

/// Encoder widths; the decoder mirrors them back down to one channel.
pub const GENERATOR_CHANNEL_PLAN: [usize; 5] = [1, 16, 32, 64, 128];

const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &str = "SPI-CHECKPOINT-V1";

/// One trainable tensor inside the flat parameter vector.
struct Slot {
    offset: usize,
    shape: Vec<usize>,
    init: SlotInit,
}

enum SlotInit {
    /// Zero-mean Gaussian with std sqrt(2 / fan_in).
    Gaussian { std: f64 },
    Ones,
    Zeros,
}

impl Slot {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

fn allocate(slots: &mut Vec<Slot>, offset: &mut usize, shape: Vec<usize>, init: SlotInit) {
    let len: usize = shape.iter().product();
    slots.push(Slot { offset: *offset, shape, init });
    *offset += len;
}

/// Fills the parameter vector slot by slot. Only Gaussian slots consume
/// randomness, in slot order, so the draw sequence is a pure function of the
/// architecture and the stream.
fn init_params(slots: &[Slot], total: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut params = vec![0.0; total];
    for slot in slots {
        let dst = &mut params[slot.offset..slot.offset + slot.len()];
        match slot.init {
            SlotInit::Gaussian { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                dst.iter_mut().for_each(|p| *p = normal.sample(rng));
            }
            SlotInit::Ones => dst.iter_mut().for_each(|p| *p = 1.0),
            SlotInit::Zeros => {}
        }
    }
    params
}

fn digest_architecture(tag: &str, dim: usize, layers: &[LayerSpec]) -> u64 {
    #[derive(Serialize)]
    struct Arch<'a> {
        tag: &'a str,
        dim: usize,
        layers: &'a [LayerSpec],
    }
    let json = serde_json::to_string(&Arch { tag, dim, layers }).expect("layer specs serialize");
    fnv1a64(json.as_bytes())
}

/// Image-domain generator: four conv+pool encoder blocks, four strided
/// deconv decoder blocks, and a sigmoid 1x1 head. Input and output are both
/// N×N single-channel planes; N must be a power of two of at least 16 so
/// every pooling stage sees an even side.
pub struct Generator {
    n: usize,
    params: Vec<f64>,
    slots: Vec<Slot>,
    digest: u64,
}

impl Generator {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if !n.is_power_of_two() || n < 16 {
            return Err(Error::InvalidArgument(format!(
                "generator side must be a power of two >= 16, got {n}"
            )));
        }
        let plan = GENERATOR_CHANNEL_PLAN;
        let mut slots = Vec::new();
        let mut offset = 0;
        for i in 0..4 {
            let fan_in = (plan[i] * 25) as f64;
            allocate(
                &mut slots,
                &mut offset,
                vec![plan[i + 1], plan[i], 5, 5],
                SlotInit::Gaussian { std: (2.0 / fan_in).sqrt() },
            );
            allocate(&mut slots, &mut offset, vec![plan[i + 1]], SlotInit::Ones);
            allocate(&mut slots, &mut offset, vec![plan[i + 1]], SlotInit::Zeros);
        }
        let up = [plan[4], plan[3], plan[2], plan[1], plan[0]];
        for i in 0..4 {
            let fan_in = (up[i] * 25) as f64;
            allocate(
                &mut slots,
                &mut offset,
                vec![up[i], up[i + 1], 5, 5],
                SlotInit::Gaussian { std: (2.0 / fan_in).sqrt() },
            );
            allocate(&mut slots, &mut offset, vec![up[i + 1]], SlotInit::Ones);
            allocate(&mut slots, &mut offset, vec![up[i + 1]], SlotInit::Zeros);
        }
        allocate(&mut slots, &mut offset, vec![1, 1, 1, 1], SlotInit::Gaussian { std: 2f64.sqrt() });
        allocate(&mut slots, &mut offset, vec![1], SlotInit::Zeros);

        let mut rng = stream(seed, Role::GeneratorInit);
        let params = init_params(&slots, offset, &mut rng);
        let digest = digest_architecture("generator", n, &Self::layer_specs());
        Ok(Generator { n, params, slots, digest })
    }

    fn layer_specs() -> Vec<LayerSpec> {
        let plan = GENERATOR_CHANNEL_PLAN;
        let mut layers = Vec::new();
        for i in 0..4 {
            layers.push(LayerSpec::conv(plan[i], plan[i + 1], 5, 1));
            layers.push(LayerSpec::batchnorm(plan[i + 1]));
            layers.push(LayerSpec::leaky_relu(LEAKY_SLOPE));
            layers.push(LayerSpec::maxpool());
        }
        let up = [plan[4], plan[3], plan[2], plan[1], plan[0]];
        for i in 0..4 {
            layers.push(LayerSpec::deconv(up[i], up[i + 1], 5, 2));
            layers.push(LayerSpec::batchnorm(up[i + 1]));
            layers.push(LayerSpec::leaky_relu(LEAKY_SLOPE));
        }
        layers.push(LayerSpec::conv(1, 1, 1, 1));
        layers.push(LayerSpec::sigmoid());
        layers
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Records the architecture on `tape` around the already-inserted input
    /// `z` (any shape with N² elements). Returns the N×N output and the
    /// parameter tensors in flat-vector order; with `trainable` they are
    /// tape parameters, otherwise constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: TensorRef,
        trainable: bool,
    ) -> Result<(TensorRef, Vec<TensorRef>)> {
        let numel: usize = tape.shape(z).iter().product();
        if numel != self.n * self.n {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                detail: format!("input has {numel} values, network side {} wants {}", self.n, self.n * self.n),
            });
        }
        let refs = insert_slots(tape, &self.slots, &self.params, trainable);
        let out = self.build(tape, z, &refs)?;
        Ok((out, refs))
    }

    fn build(&self, tape: &mut Tape, z: TensorRef, refs: &[TensorRef]) -> Result<TensorRef> {
        let mut r = refs.iter().copied();
        let mut take = || r.next().expect("slot count fixed by construction");
        let mut x = tape.reshape(z, &[1, self.n, self.n])?;
        for _ in 0..4 {
            let (k, gain, bias) = (take(), take(), take());
            x = tape.conv2d(x, k, None, 1)?;
            x = tape.batchnorm(x, gain, bias, BN_EPS)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
            x = tape.maxpool2d(x)?.0;
        }
        for _ in 0..4 {
            let (k, gain, bias) = (take(), take(), take());
            x = tape.deconv2d(x, k, 2)?;
            x = tape.batchnorm(x, gain, bias, BN_EPS)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let (k, bias) = (take(), take());
        x = tape.conv2d(x, k, Some(bias), 1)?;
        tape.sigmoid(x)
    }

    /// Plain evaluation: G(z) as a flat N² plane, no gradients recorded.
    pub fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zr = tape.constant(Tensor::new(z.to_vec(), &[z.len()])?);
        let (out, _) = self.forward(&mut tape, zr, false)?;
        Ok(tape.values(out).to_vec())
    }

    pub fn save_checkpoint<W: Write>(&self, w: W, seed: u64, iteration: u64) -> Result<()> {
        save_checkpoint(w, self.digest, &self.params, seed, iteration)
    }

    pub fn save_checkpoint_path<P: AsRef<Path>>(&self, path: P, seed: u64, iteration: u64) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_checkpoint(&mut w, seed, iteration)?;
        w.flush()?;
        Ok(())
    }

    /// Restores parameters saved from an identically shaped generator.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<CheckpointMeta> {
        load_checkpoint(r, self.digest, &mut self.params)
    }

    pub fn load_checkpoint_path<P: AsRef<Path>>(&mut self, path: P) -> Result<CheckpointMeta> {
        self.load_checkpoint(BufReader::new(File::open(path)?))
    }
}

/// Signal-domain critic: four equal-width fully connected layers with leaky
/// ReLU, then a dense layer to one sigmoid unit. The hidden width equals the
/// measured-signal length.
pub struct Discriminator {
    m: usize,
    params: Vec<f64>,
    slots: Vec<Slot>,
    digest: u64,
}

impl Discriminator {
    pub fn new(m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("discriminator needs at least one input".into()));
        }
        let mut slots = Vec::new();
        let mut offset = 0;
        for _ in 0..4 {
            allocate(
                &mut slots,
                &mut offset,
                vec![m, m],
                SlotInit::Gaussian { std: (2.0 / m as f64).sqrt() },
            );
            allocate(&mut slots, &mut offset, vec![m], SlotInit::Zeros);
        }
        allocate(&mut slots, &mut offset, vec![1, m], SlotInit::Gaussian { std: (2.0 / m as f64).sqrt() });
        allocate(&mut slots, &mut offset, vec![1], SlotInit::Zeros);

        let mut rng = stream(seed, Role::DiscriminatorInit);
        let params = init_params(&slots, offset, &mut rng);
        let digest = digest_architecture("discriminator", m, &Self::layer_specs(m));
        Ok(Discriminator { m, params, slots, digest })
    }

    fn layer_specs(m: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for _ in 0..4 {
            layers.push(LayerSpec::dense(m, m));
            layers.push(LayerSpec::leaky_relu(LEAKY_SLOPE));
        }
        layers.push(LayerSpec::dense(m, 1));
        layers.push(LayerSpec::sigmoid());
        layers
    }

    pub fn signal_len(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Records the critic on `tape` around the inserted signal (shape [M]).
    /// Returns the scalar probability node and the parameter tensors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        signal: TensorRef,
        trainable: bool,
    ) -> Result<(TensorRef, Vec<TensorRef>)> {
        let refs = insert_slots(tape, &self.slots, &self.params, trainable);
        let out = self.build(tape, signal, &refs)?;
        Ok((out, refs))
    }

    /// Second (or later) forward pass sharing parameter nodes already on the
    /// tape, so gradients from every pass accumulate into the same slots.
    pub fn forward_reusing(
        &self,
        tape: &mut Tape,
        signal: TensorRef,
        refs: &[TensorRef],
    ) -> Result<TensorRef> {
        self.build(tape, signal, refs)
    }

    fn build(&self, tape: &mut Tape, signal: TensorRef, refs: &[TensorRef]) -> Result<TensorRef> {
        if tape.shape(signal) != [self.m] {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!("signal shape {:?}, expected [{}]", tape.shape(signal), self.m),
            });
        }
        let mut r = refs.iter().copied();
        let mut take = || r.next().expect("slot count fixed by construction");
        let mut x = signal;
        for _ in 0..4 {
            let (w, b) = (take(), take());
            x = tape.dense(x, w, b)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let (w, b) = (take(), take());
        x = tape.dense(x, w, b)?;
        tape.sigmoid(x)
    }

    /// Plain evaluation of D(signal) without gradients.
    pub fn evaluate(&self, signal: &[f64]) -> Result<f64> {
        if signal.len() != self.m {
            return Err(Error::ShapeMismatch {
                op: "discriminator_evaluate",
                detail: format!("signal has {} samples, network wants {}", signal.len(), self.m),
            });
        }
        let (_, p) = self.stack_activations(signal);
        Ok(p)
    }

    /// Weight slab and bias offsets for hidden layer `l` (0..4).
    fn hidden_offsets(&self, l: usize) -> (usize, usize) {
        (self.slots[2 * l].offset, self.slots[2 * l + 1].offset)
    }

    /// Forward pass keeping each layer's input: acts[l] feeds hidden layer l
    /// (acts[0] is the signal itself), acts[4] feeds the output unit.
    /// Matches the taped forward bit for bit; the kernels are the same.
    fn stack_activations(&self, signal: &[f64]) -> (Vec<Vec<f64>>, f64) {
        let m = self.m;
        let mut acts = Vec::with_capacity(5);
        acts.push(signal.to_vec());
        for l in 0..4 {
            let (w_off, b_off) = self.hidden_offsets(l);
            let w = &self.params[w_off..w_off + m * m];
            let b = &self.params[b_off..b_off + m];
            let prev = acts.last().expect("seeded with the input");
            let mut next = vec![0.0; m];
            for j in 0..m {
                let z = dot(&w[j * m..(j + 1) * m], prev) + b[j];
                next[j] = if z > 0.0 { z } else { LEAKY_SLOPE * z };
            }
            acts.push(next);
        }
        let w = &self.params[self.slots[8].offset..][..m];
        let s = dot(w, acts.last().expect("five levels")) + self.params[self.slots[9].offset];
        (acts, sigmoid_scalar(s))
    }

    /// As `stack_activations` for two signals at once, reading each weight
    /// row a single time.
    fn stack_activations_pair(&self, x0: &[f64], x1: &[f64]) -> ([Vec<Vec<f64>>; 2], [f64; 2]) {
        let m = self.m;
        let mut acts = [Vec::with_capacity(5), Vec::with_capacity(5)];
        acts[0].push(x0.to_vec());
        acts[1].push(x1.to_vec());
        for l in 0..4 {
            let (w_off, b_off) = self.hidden_offsets(l);
            let w = &self.params[w_off..w_off + m * m];
            let b = &self.params[b_off..b_off + m];
            let mut next = [vec![0.0; m], vec![0.0; m]];
            for j in 0..m {
                let row = &w[j * m..(j + 1) * m];
                for pass in 0..2 {
                    let z = dot(row, acts[pass].last().expect("seeded")) + b[j];
                    next[pass][j] = if z > 0.0 { z } else { LEAKY_SLOPE * z };
                }
            }
            let [n0, n1] = next;
            acts[0].push(n0);
            acts[1].push(n1);
        }
        let w = &self.params[self.slots[8].offset..][..m];
        let b = self.params[self.slots[9].offset];
        let probs = [
            sigmoid_scalar(dot(w, acts[0].last().expect("five levels")) + b),
            sigmoid_scalar(dot(w, acts[1].last().expect("five levels")) + b),
        ];
        (acts, probs)
    }

    /// One optimizer step of the critic loss −ln D(real) − ln(1−D(fake)),
    /// both probabilities floored before the log. Returns the loss and a
    /// divergence flag; a true flag means a gradient overflowed and the
    /// remaining updates were abandoned, so the network state is only fit
    /// for discarding.
    ///
    /// The backward pass is fused with the update: each weight row's
    /// gradient is formed in cache and consumed by Adam on the spot, which
    /// avoids materializing tape nodes for the m×m hidden layers.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        real: &[f64],
        fake: &[f64],
        floor: f64,
    ) -> Result<(f64, bool)> {
        let m = self.m;
        if real.len() != m || fake.len() != m {
            return Err(Error::ShapeMismatch {
                op: "discriminator_train",
                detail: format!(
                    "signals have {} and {} samples, network wants {m}",
                    real.len(),
                    fake.len()
                ),
            });
        }
        let (acts, [p_real, p_fake]) = self.stack_activations_pair(real, fake);
        let c_real = p_real.max(floor);
        let comp = 1.0 - p_fake;
        let c_comp = comp.max(floor);
        let loss = -(c_real.ln() + c_comp.ln());
        if !loss.is_finite() {
            return Ok((loss, true));
        }
        adam.begin_step();

        // d loss / d pre-sigmoid score, with the floor gating the flat region
        // exactly as the clamped graph does.
        let gs = [
            if p_real > floor { -1.0 / c_real * p_real * (1.0 - p_real) } else { 0.0 },
            if comp > floor { 1.0 / c_comp * p_fake * (1.0 - p_fake) } else { 0.0 },
        ];

        let w4_off = self.slots[8].offset;
        let b4_off = self.slots[9].offset;
        let mut ga = [vec![0.0; m], vec![0.0; m]];
        let bound = gs[0].abs() * max_abs(&acts[0][4]) + gs[1].abs() * max_abs(&acts[1][4]);
        if !bound.is_finite() {
            return Ok((loss, true));
        }
        let mut dw_row = vec![0.0; m];
        {
            let w4 = &self.params[w4_off..w4_off + m];
            axpy(gs[0], w4, &mut ga[0]);
            axpy(gs[1], w4, &mut ga[1]);
            for i in 0..m {
                dw_row[i] = gs[0] * acts[0][4][i] + gs[1] * acts[1][4][i];
            }
        }
        adam.apply_range(w4_off, &mut self.params[w4_off..w4_off + m], &dw_row)?;
        adam.apply_range(b4_off, &mut self.params[b4_off..b4_off + 1], &[gs[0] + gs[1]])?;

        for l in (0..4).rev() {
            let (w_off, b_off) = self.hidden_offsets(l);
            let mut gz = [vec![0.0; m], vec![0.0; m]];
            for pass in 0..2 {
                for j in 0..m {
                    let mask = if acts[pass][l + 1][j] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                    gz[pass][j] = ga[pass][j] * mask;
                }
            }
            // Finite bounds on every weight and bias gradient element; a
            // non-finite bound means the step overflowed somewhere.
            let gz_peak = [max_abs(&gz[0]), max_abs(&gz[1])];
            let bound = gz_peak[0] * max_abs(&acts[0][l]) + gz_peak[1] * max_abs(&acts[1][l]);
            if !bound.is_finite() || !(gz_peak[0] + gz_peak[1]).is_finite() {
                return Ok((loss, true));
            }
            let mut next_ga = [vec![0.0; m], vec![0.0; m]];
            for j in 0..m {
                {
                    let row = &self.params[w_off + j * m..w_off + (j + 1) * m];
                    if l > 0 {
                        axpy(gz[0][j], row, &mut next_ga[0]);
                        axpy(gz[1][j], row, &mut next_ga[1]);
                    }
                }
                for i in 0..m {
                    dw_row[i] = gz[0][j] * acts[0][l][i] + gz[1][j] * acts[1][l][i];
                }
                adam.apply_range(
                    w_off + j * m,
                    &mut self.params[w_off + j * m..w_off + (j + 1) * m],
                    &dw_row,
                )?;
            }
            let db: Vec<f64> = (0..m).map(|j| gz[0][j] + gz[1][j]).collect();
            adam.apply_range(b_off, &mut self.params[b_off..b_off + m], &db)?;
            ga = next_ga;
        }
        Ok((loss, false))
    }

    /// Value and input-gradient of −ln(max(D(signal), floor)) at fixed
    /// weights. Generators add this term to their own graphs; computing it
    /// here keeps the critic's m×m layers off their tapes.
    pub fn adv_input_grad(&self, signal: &[f64], floor: f64) -> Result<(f64, Vec<f64>)> {
        let m = self.m;
        if signal.len() != m {
            return Err(Error::ShapeMismatch {
                op: "discriminator_adv",
                detail: format!("signal has {} samples, network wants {m}", signal.len()),
            });
        }
        let (acts, p) = self.stack_activations(signal);
        let c = p.max(floor);
        let value = -c.ln();
        let gs = if p > floor { -1.0 / c * p * (1.0 - p) } else { 0.0 };
        let mut ga = vec![0.0; m];
        axpy(gs, &self.params[self.slots[8].offset..][..m], &mut ga);
        for l in (0..4).rev() {
            let (w_off, _) = self.hidden_offsets(l);
            let mut next = vec![0.0; m];
            for j in 0..m {
                let mask = if acts[l + 1][j] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                axpy(ga[j] * mask, &self.params[w_off + j * m..][..m], &mut next);
            }
            ga = next;
        }
        Ok((value, ga))
    }

    pub fn save_checkpoint<W: Write>(&self, w: W, seed: u64, iteration: u64) -> Result<()> {
        save_checkpoint(w, self.digest, &self.params, seed, iteration)
    }

    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<CheckpointMeta> {
        load_checkpoint(r, self.digest, &mut self.params)
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Largest magnitude, NaN-propagating: `f64::max` would discard a NaN and
/// let a poisoned buffer pass the divergence bounds.
fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| if acc >= x.abs() { acc } else { x.abs() })
}

fn insert_slots(tape: &mut Tape, slots: &[Slot], params: &[f64], trainable: bool) -> Vec<TensorRef> {
    slots
        .iter()
        .map(|slot| {
            let t = Tensor::new(
                params[slot.offset..slot.offset + slot.len()].to_vec(),
                &slot.shape,
            )
            .expect("slot shapes are consistent");
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect()
}

/// Metadata stored alongside checkpointed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iteration: u64,
}

fn save_checkpoint<W: Write>(
    mut w: W,
    digest: u64,
    params: &[f64],
    seed: u64,
    iteration: u64,
) -> Result<()> {
    writeln!(
        w,
        "{CHECKPOINT_MAGIC} arch={digest:016x} seed={seed} iteration={iteration} count={}",
        params.len()
    )?;
    write_f64_block(&mut w, params)?;
    Ok(())
}

fn load_checkpoint<R: Read>(mut r: R, digest: u64, params: &mut [f64]) -> Result<CheckpointMeta> {
    let line = read_line(&mut r)?;
    let Some(rest) = line.strip_prefix(CHECKPOINT_MAGIC) else {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC });
    };
    let fields = parse_kv(rest)?;
    let arch = u64::from_str_radix(&field::<String>(&fields, "arch")?, 16)
        .map_err(|e| Error::BadHeader(format!("arch: {e}")))?;
    let seed: u64 = field(&fields, "seed")?;
    let iteration: u64 = field(&fields, "iteration")?;
    let count: usize = field(&fields, "count")?;
    if arch != digest {
        return Err(Error::CheckpointMismatch(format!(
            "architecture digest {arch:016x} does not match this network ({digest:016x})"
        )));
    }
    if count != params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {count} parameters, network has {}",
            params.len()
        )));
    }
    let values = read_f64_block(&mut r, count, "parameter block")?;
    expect_eof(&mut r, "checkpoint file")?;
    params.copy_from_slice(&values);
    Ok(CheckpointMeta { seed, iteration })
}
