"""End-to-end desk-scale distillation pipeline: synthetic paired data, a
frozen synthetic teacher encoder, phase-1 velocity training, phase-2 student
training with the feature-matching loss, a DDIM baseline, and the sampler
comparison table.

Everything is driven by named RNG streams derived from the config seed, so a
given (config, seed) reproduces its metrics CSVs byte for byte. Wall-clock
timings are therefore never written into the reproducible CSVs; they go to
separate timing files and stdout summaries.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import flexloss as fx
from . import ndtensor as nd
from . import nn_blocks as nn
from . import rectflow as rf
from .autodiff import Param, Tensor


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite; the diagnostic record
    has already been appended to the metrics stream."""


@dataclass
class ExperimentConfig:
    seed: int = 42
    feature_dim: int = 256
    batch_size: int = 8
    phase1_iters: int = 500
    phase2_iters: int = 500
    lr_rex: float = 2e-4
    lr_img: float = 2e-4
    lr_phase2: float = 1e-4
    lambda_kd: float = 1.0
    lambda_traj: float = 1.0
    lambda_flex: float = 0.15
    lambda_vel: float = 0.05
    sampler_steps: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    image_size: int = 16
    t_max: int = 4
    channels: int = 16
    head_count: int = 2
    dataset_size: int = 64
    holdout_size: int = 16
    log_interval: int = 25
    ddim_train_steps: int = 50
    ddim_iters: int = 1500
    ddim_max_beta: float = 0.1
    compare_count: int = 512

    def __post_init__(self):
        for name in ("lr_rex", "lr_img", "lr_phase2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config: {name} must be positive")
        if self.feature_dim <= 0 or self.batch_size <= 0:
            raise ValueError("config: feature_dim and batch_size must be positive")
        if self.image_size % 4 != 0:
            raise ValueError("config: image_size must be divisible by 4")
        if self.channels % (4 * self.head_count) != 0:
            raise ValueError("config: channels must be divisible by 4*head_count")
        for s in self.sampler_steps:
            if not (1 <= int(s) <= 5):
                raise ValueError(f"config: sampler step {s} outside [1,5]")


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; unknown keys are rejected, missing keys default."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config file must contain a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"config: unknown keys {unknown}")
    return ExperimentConfig(**raw)


def save_config(path, config: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class MetricsRecord:
    iteration: int
    components: dict  # named loss terms, including "total"
    feature_mse: float
    frechet: float
    steps: int
    wall_time: float  # seconds since phase start; excluded from the CSV


def write_metrics_csv(path, records: list, component_names: list) -> None:
    """Deterministic CSV: header plus one row per record. Floats use repr
    (shortest round-trip), so identical runs give identical bytes."""
    cols = ["iteration"] + component_names + ["feature_mse", "frechet", "steps"]
    lines = [",".join(cols)]
    for r in records:
        row = [str(r.iteration)]
        row += [repr(float(r.components[c])) for c in component_names]
        row += [repr(float(r.feature_mse)), repr(float(r.frechet)), str(r.steps)]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class Adam:
    """Adaptive-moment optimizer with momentum terms (0.9, 0.999); param
    clamp bounds are re-applied after every step."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.apply_bounds()


def params_checksum(params: dict) -> int:
    """Order-independent-by-name crc over the raw param bytes."""
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(params[name].data.tobytes(), crc)
        crc = zlib.crc32(name.encode("utf-8"), crc)
    return crc


# -- synthetic data ---------------------------------------------------------------

def _bilinear_upsample(field2d: np.ndarray, size: int) -> np.ndarray:
    """Upsample a small 2-d grid to size x size (separable linear interp)."""
    src = field2d.shape[0]
    pos = np.linspace(0.0, src - 1.0, size)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = field2d[lo][:, lo] * np.outer(1 - frac, 1 - frac) \
        + field2d[lo][:, hi] * np.outer(1 - frac, frac) \
        + field2d[hi][:, lo] * np.outer(frac, 1 - frac) \
        + field2d[hi][:, hi] * np.outer(frac, frac)
    return rows


def _box_smooth(x: np.ndarray) -> np.ndarray:
    """3x3 box average with replicate edges, applied per channel."""
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + x.shape[1], dx:dx + x.shape[2]]
    return acc / 9.0


def synth_dataset(rng: nd.Rng, n: int, image_size: int) -> list:
    """Procedural low-quality / ground-truth pairs in [0,1], shape (3,S,S).

    gt = reflectance texture * smooth illumination field; lq dims the gt by a
    random factor in [0.15, 0.45] and adds small Gaussian noise, so the lq
    mean always sits well below the gt mean.
    """
    if n <= 0:
        raise ValueError(f"synth_dataset: n must be positive, got {n}")
    pairs = []
    for _ in range(n):
        lum_small = rng.uniform((4, 4), 0.3, 1.0)
        lum = _bilinear_upsample(lum_small, image_size)[None, :, :]
        texture = 0.5 * rng.uniform((3, image_size, image_size)) \
            + 0.5 * _box_smooth(rng.uniform((3, image_size, image_size)))
        gt = np.clip(texture * lum, 0.0, 1.0)
        dim = rng.uniform((), 0.15, 0.45)
        noise = rng.normal((3, image_size, image_size), scale=0.01)
        lq = np.clip(gt * dim + noise, 0.0, 1.0)
        pairs.append((lq, gt))
    return pairs


def stack_batch(pairs: list, indices=None):
    idx = range(len(pairs)) if indices is None else indices
    lq = np.stack([pairs[i][0] for i in idx])
    gt = np.stack([pairs[i][1] for i in idx])
    return lq, gt


# -- synthetic teacher ---------------------------------------------------------------

class SyntheticTeacher:
    """Frozen seeded encoder from (lq, gt) image pairs to a pair of 256-dim
    feature vectors (reflectance-path and image-path). Pixel-unshuffle,
    two 3x3 convs, spatial mean pooling, then two linear heads whose scales
    are calibrated at init so the features have roughly unit spread.
    Deterministic: the same images always map to the same features.
    """

    def __init__(self, rng: nd.Rng, image_size: int = 16, feature_dim: int = 256):
        self.image_size = image_size
        self.feature_dim = feature_dim
        c_in = 6 * 4  # lq+gt stacked, then unshuffled by 2
        self.w1 = rng.normal((32, c_in, 3, 3)) * math.sqrt(2.0 / (c_in * 9))
        self.w2 = rng.normal((32, 32, 3, 3)) * math.sqrt(2.0 / (32 * 9))
        self.h_rex = rng.normal((32, feature_dim))
        self.h_img = rng.normal((32, feature_dim))
        # calibrate head scales on a probe batch so feature std is ~1
        probe = synth_dataset(rng.derive("teacher-probe"), 16, image_size)
        lq, gt = stack_batch(probe)
        pooled = self._pool(lq, gt)
        for h in (self.h_rex, self.h_img):
            feats = pooled @ h
            h /= max(feats.std(), 1e-6)

    def _pool(self, lq: np.ndarray, gt: np.ndarray) -> np.ndarray:
        x = np.concatenate([lq, gt], axis=1)
        x = nd.pixel_unshuffle(x, 2)
        win = ad._windows3x3(x)
        h1 = np.einsum("bihwkl,oikl->bohw", win, self.w1, optimize=True)
        h1 = np.where(h1 > 0, h1, 0.1 * h1)
        win = ad._windows3x3(h1)
        h2 = np.einsum("bihwkl,oikl->bohw", win, self.w2, optimize=True)
        h2 = np.where(h2 > 0, h2, 0.1 * h2)
        return h2.mean(axis=(2, 3))

    def encode_pair(self, lq: np.ndarray, gt: np.ndarray):
        """Teacher feature targets for (lq, gt) batches: (ipr_rex, ipr_img)."""
        pooled = self._pool(lq, gt)
        return pooled @ self.h_rex, pooled @ self.h_img

    def conditioning(self, lq: np.ndarray):
        """Conditioning features computable from the degraded input alone
        (the gt slot is filled with the lq image)."""
        return self.encode_pair(lq, lq)


@dataclass
class FeatureSet:
    """Precomputed per-item teacher features and conditioning vectors."""

    c_rex: np.ndarray
    c_img: np.ndarray
    f_rex: np.ndarray
    f_img: np.ndarray

    @staticmethod
    def build(teacher: SyntheticTeacher, pairs: list) -> "FeatureSet":
        lq, gt = stack_batch(pairs)
        f_rex, f_img = teacher.encode_pair(lq, gt)
        c_rex, c_img = teacher.conditioning(lq)
        return FeatureSet(c_rex, c_img, f_rex, f_img)


# -- student network ---------------------------------------------------------------

class StudentNet:
    """Toy restoration student: 3x3 stem conv into C channels, one
    conditioned transformer block, 3x3 head conv back to rgb with a global
    residual onto the degraded input."""

    def __init__(self, rng: nd.Rng, channels: int = 16, head_count: int = 2,
                 prefix: str = "student"):
        self.channels = channels
        self.stem_w = Param(rng.normal((channels, 3, 3, 3)) * math.sqrt(2.0 / 27), f"{prefix}.stem.w")
        self.stem_b = Param(np.zeros(channels), f"{prefix}.stem.b")
        self.block = nn.ToyTransformerBlock(channels, head_count, rng, prefix=f"{prefix}.block")
        self.head_w = Param(rng.normal((3, channels, 3, 3)) * 0.05, f"{prefix}.head.w")
        self.head_b = Param(np.zeros(3), f"{prefix}.head.b")

    def params(self) -> dict:
        out = {self.stem_w.name: self.stem_w, self.stem_b.name: self.stem_b,
               self.head_w.name: self.head_w, self.head_b.name: self.head_b}
        out.update(self.block.params())
        return out

    def forward(self, lq: Tensor, ipr: Tensor, collect: dict = None) -> Tensor:
        lq = ad._lift(lq)
        h = ad.conv2d_3x3(lq, self.stem_w) + ad.reshape(self.stem_b, (1, -1, 1, 1))
        h = self.block.forward(h, ipr, collect=collect)
        out = ad.conv2d_3x3(h, self.head_w) + ad.reshape(self.head_b, (1, -1, 1, 1))
        return out + lq


# -- phase 1: velocity training ------------------------------------------------------

def _frechet_probe(nets: dict, feats: FeatureSet, probe_z: np.ndarray, t_max: int) -> float:
    """Frechet distance between Euler-sampled and teacher image features on a
    fixed probe set (fixed z), using the full t_max-step sampler."""
    n = probe_z.shape[0]
    cfg = rf.SamplerConfig(steps=min(t_max, 5), kind=rf.RECTIFIED_FLOW)
    x, _ = rf.euler_sample(nets["img"], ad.constant(probe_z), ad.constant(feats.c_img[:n]), cfg)
    sampled = x.data
    ref = feats.f_img[:n]
    mu1, cov1 = sampled.mean(axis=0), np.cov(sampled, rowvar=False)
    mu2, cov2 = ref.mean(axis=0), np.cov(ref, rowvar=False)
    return nd.gaussian_frechet_distance(mu1, cov1, mu2, cov2)


def _feature_mse(nets, feats: FeatureSet, idx, z_rex, z_img, t_max: int) -> float:
    cfg = rf.SamplerConfig(steps=min(t_max, 5), kind=rf.RECTIFIED_FLOW)
    total = 0.0
    for key, z, c, f in (("rex", z_rex, feats.c_rex, feats.f_rex),
                         ("img", z_img, feats.c_img, feats.f_img)):
        x, _ = rf.euler_sample(nets[key], ad.constant(z), ad.constant(c[idx]), cfg)
        total += float(((x.data - f[idx]) ** 2).mean())
    return total / 2.0


def train_phase1(config: ExperimentConfig, teacher: SyntheticTeacher, data: list,
                 record_sink: list = None):
    """Train the two velocity predictors against frozen teacher features.

    Per iteration the loss is
        L_vel(rex) + L_vel(img)
        + lambda_kd  * (mse-to-teacher of the 4-step sampled endpoint, both streams)
        + lambda_traj * (trajectory consistency, both streams),
    with one Adam optimizer per predictor. Aborts via TrainingDiverged on a
    non-finite loss after appending a diagnostic record.
    """
    rng = nd.Rng(config.seed)
    feats = FeatureSet.build(teacher, data)
    n = len(data)
    nets = {
        "rex": nn.VelocityPredictor(rng.derive("vel-rex-init"), config.feature_dim,
                                    t_max=config.t_max, prefix="vel_rex"),
        "img": nn.VelocityPredictor(rng.derive("vel-img-init"), config.feature_dim,
                                    t_max=config.t_max, prefix="vel_img"),
    }
    opts = {
        "rex": Adam(nets["rex"].params(), config.lr_rex),
        "img": Adam(nets["img"].params(), config.lr_img),
    }
    loop = rng.derive("phase1-loop")
    probe_z = rng.derive("phase1-probe").normal((min(128, n), config.feature_dim))
    records = record_sink if record_sink is not None else []
    cfg_traj = rf.SamplerConfig(steps=min(config.t_max, 5), kind=rf.RECTIFIED_FLOW)
    start = time.perf_counter()

    for it in range(config.phase1_iters):
        idx = loop.integers(0, n, config.batch_size)
        comps = {}
        total = ad.constant(0.0)
        stream_z = {}
        for key, c_all, f_all in (("rex", feats.c_rex, feats.f_rex),
                                  ("img", feats.c_img, feats.f_img)):
            z = loop.normal((config.batch_size, config.feature_dim))
            stream_z[key] = z
            zc = ad.constant(z)
            fc = ad.constant(f_all[idx])
            cc = ad.constant(c_all[idx])
            l_vel = rf.velocity_matching_loss(nets[key], (zc, fc, cc), loop)
            x_fin, traj = rf.euler_sample(nets[key], zc, cc, cfg_traj)
            d = x_fin - fc
            l_kd = ad.mean(d * d)
            l_traj = rf.trajectory_consistency_loss(traj, fc)
            comps[f"vel_{key}"] = l_vel.item()
            comps.setdefault("kd", 0.0)
            comps["kd"] += l_kd.item()
            comps.setdefault("traj", 0.0)
            comps["traj"] += l_traj.item()
            total = total + l_vel + config.lambda_kd * l_kd + config.lambda_traj * l_traj
        comps["total"] = total.item()

        if not math.isfinite(comps["total"]):
            records.append(MetricsRecord(it, comps, float("nan"), float("nan"),
                                         config.t_max, time.perf_counter() - start))
            raise TrainingDiverged(f"phase1: non-finite loss at iteration {it}")

        for opt in opts.values():
            opt.zero_grad()
        total.backward()
        for opt in opts.values():
            opt.step()

        if it % config.log_interval == 0 or it == config.phase1_iters - 1:
            fmse = _feature_mse(nets, feats, idx, stream_z["rex"], stream_z["img"], config.t_max)
            fd = _frechet_probe(nets, feats, probe_z, config.t_max)
            records.append(MetricsRecord(it, comps, fmse, fd, config.t_max,
                                         time.perf_counter() - start))
    for net in nets.values():
        net.trained = True
    return nets, records


PHASE1_COMPONENTS = ["total", "vel_rex", "vel_img", "kd", "traj"]
PHASE2_COMPONENTS = ["total", "rec", "flex", "vel_rex", "vel_img", "holdout_l1", "gate_frac"]


def phase1_loss_total(components: dict, config: ExperimentConfig) -> float:
    """Recombine logged phase-1 components into the total (bookkeeping check)."""
    return (components["vel_rex"] + components["vel_img"]
            + config.lambda_kd * components["kd"] + config.lambda_traj * components["traj"])


# -- phase 2: student training --------------------------------------------------------

def _sample_state_at(net, z: np.ndarray, c: np.ndarray, t_idx: int, t_max: int) -> np.ndarray:
    """Trajectory state at discrete time t_idx (z itself at t_idx = 0),
    detached from the graph."""
    if t_idx == 0:
        return z
    cfg = rf.SamplerConfig(steps=min(t_max, 5), kind=rf.RECTIFIED_FLOW)
    _, traj = rf.euler_sample(net, ad.constant(z), ad.constant(c), cfg)
    return traj[t_idx - 1].data


def _holdout_l1(student: StudentNet, vel_rex, holdout_pairs, hold_feats: FeatureSet,
                hold_z: np.ndarray, t_max: int) -> float:
    lq, gt = stack_batch(holdout_pairs)
    ipr = _sample_state_at(vel_rex, hold_z, hold_feats.c_rex, t_max, t_max)
    pred = student.forward(ad.constant(lq), ad.constant(ipr))
    return float(np.abs(pred.data - gt).mean())


def train_phase2(config: ExperimentConfig, vel_nets: dict, teacher: SyntheticTeacher,
                 data: list, holdout: list = None, student: StudentNet = None,
                 record_sink: list = None):
    """Train the student against frozen velocity predictors.

    Each iteration draws a timestep index uniformly from {0..t_max}; the
    student consumes the (detached) sampled trajectory state at that time as
    its conditioning. The feature-matching term compares block activations
    against a frozen copy of the initial student fed the teacher's true
    features, and is gated by the drawn timestep. Velocity losses are logged
    and enter the total, but the predictors stay frozen.
    """
    for key in ("rex", "img"):
        if key not in vel_nets or not getattr(vel_nets[key], "trained", False):
            raise ValueError("train_phase2: velocity predictors must be trained (phase 1) first")
    rng = nd.Rng(config.seed)
    feats = FeatureSet.build(teacher, data)
    n = len(data)
    if student is None:
        student = StudentNet(rng.derive("student-init"), config.channels, config.head_count)
    teacher_side = StudentNet(rng.derive("student-init"), config.channels, config.head_count,
                              prefix="teacher_side")
    opt = Adam(student.params(), config.lr_phase2)
    loop = rng.derive("phase2-loop")
    flex_cfg = fx.FlexConfig(t_max=config.t_max)
    records = record_sink if record_sink is not None else []
    gate_hits = 0

    holdout = holdout or []
    hold_feats = FeatureSet.build(teacher, holdout) if holdout else None
    hold_z = rng.derive("phase2-holdout").normal((len(holdout), config.feature_dim)) if holdout else None

    def holdout_metric():
        if not holdout:
            return float("nan")
        return _holdout_l1(student, vel_nets["rex"], holdout, hold_feats, hold_z, config.t_max)

    initial_holdout = holdout_metric()
    start = time.perf_counter()

    for it in range(config.phase2_iters):
        idx = loop.integers(0, n, config.batch_size)
        lq, gt = stack_batch(data, idx)
        t_idx = int(loop.integers(0, config.t_max + 1, ()))
        z = loop.normal((config.batch_size, config.feature_dim))
        ipr_state = _sample_state_at(vel_nets["rex"], z, feats.c_rex[idx], t_idx, config.t_max)

        acts = {}
        pred = student.forward(ad.constant(lq), ad.constant(ipr_state), collect=acts)
        l_rec = ad.mean(ad.abs_(pred - ad.constant(gt)))

        gate_open = t_idx / config.t_max < flex_cfg.snr_threshold
        if gate_open:
            gate_hits += 1
            t_acts = {}
            teacher_side.forward(ad.constant(lq), ad.constant(feats.f_rex[idx]), collect=t_acts)
            stud_bundle = fx.FeatureBundle()
            teach_bundle = fx.FeatureBundle()
            for layer in ("attn_res", "block_out"):
                stud_bundle.add(layer, acts[layer])
                teach_bundle.add(layer, t_acts[layer].detach())
            l_flex = fx.flex_loss(teach_bundle, stud_bundle, t_idx, flex_cfg)
        else:
            l_flex = ad.constant(0.0)

        l_vel = {}
        for key, c_all, f_all in (("rex", feats.c_rex, feats.f_rex),
                                  ("img", feats.c_img, feats.f_img)):
            zv = ad.constant(loop.normal((config.batch_size, config.feature_dim)))
            l_vel[key] = rf.velocity_matching_loss(
                vel_nets[key], (zv, ad.constant(f_all[idx]), ad.constant(c_all[idx])), loop)

        total = l_rec + config.lambda_flex * l_flex \
            + config.lambda_vel * (l_vel["rex"] + l_vel["img"])
        comps = {"total": total.item(), "rec": l_rec.item(), "flex": l_flex.item(),
                 "vel_rex": l_vel["rex"].item(), "vel_img": l_vel["img"].item(),
                 "holdout_l1": float("nan"), "gate_frac": gate_hits / (it + 1)}

        if not math.isfinite(comps["total"]):
            records.append(MetricsRecord(it, comps, float("nan"), float("nan"),
                                         config.t_max, time.perf_counter() - start))
            raise TrainingDiverged(f"phase2: non-finite loss at iteration {it}")

        opt.zero_grad()
        total.backward()
        opt.step()

        if it % config.log_interval == 0 or it == config.phase2_iters - 1:
            comps = dict(comps)
            comps["holdout_l1"] = holdout_metric()
            fmse = float(((ipr_state - feats.f_rex[idx]) ** 2).mean())
            records.append(MetricsRecord(it, comps, fmse, float("nan"),
                                         config.t_max, time.perf_counter() - start))

    summary = {
        "initial_holdout_l1": initial_holdout,
        "final_holdout_l1": holdout_metric(),
        "gate_fraction": gate_hits / max(config.phase2_iters, 1),
    }
    return student, records, summary


def phase2_loss_total(components: dict, config: ExperimentConfig) -> float:
    return (components["rec"] + config.lambda_flex * components["flex"]
            + config.lambda_vel * (components["vel_rex"] + components["vel_img"]))


# -- DDIM baseline training ------------------------------------------------------------

def train_ddim_baseline(config: ExperimentConfig, teacher: SyntheticTeacher, data: list):
    """Epsilon-prediction net on the squared-cosine schedule over the image
    feature stream; same architecture as a phase-1 predictor, with a larger
    iteration budget to offset the extra gradient signal the velocity nets
    receive from the distillation and trajectory terms. Betas are clipped at
    ddim_max_beta so the terminal signal level stays non-degenerate at T=50
    (the x0 reconstruction divides by sqrt(alpha_bar))."""
    rng = nd.Rng(config.seed)
    feats = FeatureSet.build(teacher, data)
    n = len(data)
    T = config.ddim_train_steps
    alpha_bars = rf.cosine_alpha_bars(T, max_beta=config.ddim_max_beta)
    net = nn.VelocityPredictor(rng.derive("ddim-init"), config.feature_dim,
                               t_max=T - 1, prefix="ddim")
    opt = Adam(net.params(), config.lr_img)
    loop = rng.derive("ddim-loop")

    for it in range(config.ddim_iters):
        idx = loop.integers(0, n, config.batch_size)
        f = feats.f_img[idx]
        c = feats.c_img[idx]
        t = loop.integers(0, T, (config.batch_size,))
        eps = loop.normal((config.batch_size, config.feature_dim))
        ab = alpha_bars[t].reshape(-1, 1)
        x_t = np.sqrt(ab) * f + np.sqrt(1.0 - ab) * eps
        pred = net.forward(ad.constant(x_t), t, ad.constant(c))
        d = pred - ad.constant(eps)
        loss = ad.mean(ad.sum_(d * d, axes=1))
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"ddim baseline: non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.trained = True
    net.alpha_bars = alpha_bars
    return net


# -- sampler comparison ------------------------------------------------------------------

@dataclass
class SamplerRow:
    sampler: str
    steps: int
    frechet: float
    mse: float
    wall_ms: float


def compare_samplers(config: ExperimentConfig, rf_net, ddim_net,
                     teacher: SyntheticTeacher, out_csv=None, timing_csv=None) -> list:
    """Sample `compare_count` image features per (sampler, step count) and
    score them against fresh teacher features: Gaussian Frechet distance of
    the sample cloud plus per-item MSE.

    The result CSV (sampler, steps, frechet, mse) is byte-reproducible for a
    fixed seed; wall-clock milliseconds go to the separate timing CSV.
    """
    if not getattr(rf_net, "trained", False) or not getattr(ddim_net, "trained", False):
        raise ValueError("compare_samplers: both samplers must be trained")
    rng = nd.Rng(config.seed).derive("compare")
    pairs = synth_dataset(rng.derive("eval-data"), config.compare_count, config.image_size)
    lq, gt = stack_batch(pairs)
    f_rex, f_img = teacher.encode_pair(lq, gt)
    c_rex, c_img = teacher.conditioning(lq)
    z = rng.derive("eval-z").normal((config.compare_count, config.feature_dim))
    mu_ref, cov_ref = f_img.mean(axis=0), np.cov(f_img, rowvar=False)

    rows = []
    for steps in config.sampler_steps:
        for name in ("rf", "ddim"):
            t0 = time.perf_counter()
            if name == "rf":
                cfg = rf.SamplerConfig(steps=steps, kind=rf.RECTIFIED_FLOW)
                x, _ = rf.euler_sample(rf_net, ad.constant(z), ad.constant(c_img), cfg)
            else:
                cfg = rf.SamplerConfig(steps=steps, kind=rf.DDIM_BASELINE)
                x = rf.ddim_baseline_sample(ddim_net, ad.constant(z), ad.constant(c_img),
                                            cfg, ddim_net.alpha_bars)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            sampled = x.data
            fd = nd.gaussian_frechet_distance(sampled.mean(axis=0),
                                              np.cov(sampled, rowvar=False), mu_ref, cov_ref)
            mse = float(((sampled - f_img) ** 2).mean())
            rows.append(SamplerRow(name, steps, fd, mse, wall_ms))

    if out_csv:
        lines = ["sampler,steps,frechet,mse"]
        lines += [f"{r.sampler},{r.steps},{repr(r.frechet)},{repr(r.mse)}" for r in rows]
        with open(out_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    if timing_csv:
        lines = ["sampler,steps,frechet,mse,wall_ms"]
        lines += [f"{r.sampler},{r.steps},{repr(r.frechet)},{repr(r.mse)},{r.wall_ms:.3f}"
                  for r in rows]
        with open(timing_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return rows


# -- full pipeline -------------------------------------------------------------------------

def distill(config: ExperimentConfig, outdir=None) -> dict:
    """Run both phases end to end; returns a summary dict and, when outdir is
    given, writes metrics CSVs and checkpoints there."""
    import os

    rng = nd.Rng(config.seed)
    all_pairs = synth_dataset(rng.derive("dataset"), config.dataset_size + config.holdout_size,
                              config.image_size)
    data = all_pairs[:config.dataset_size]
    holdout = all_pairs[config.dataset_size:]
    teacher = SyntheticTeacher(rng.derive("teacher"), config.image_size, config.feature_dim)

    student = StudentNet(nd.Rng(config.seed).derive("student-init"),
                         config.channels, config.head_count)
    student_sum_before = params_checksum(student.params())

    nets, p1_records = train_phase1(config, teacher, data)
    if params_checksum(student.params()) != student_sum_before:
        raise RuntimeError("phase-1 freeze violated: student params changed")

    student, p2_records, p2_summary = train_phase2(config, nets, teacher, data,
                                                   holdout=holdout, student=student)

    summary = {
        "phase1_initial_vel": p1_records[0].components["vel_rex"] + p1_records[0].components["vel_img"],
        "phase1_final_vel": p1_records[-1].components["vel_rex"] + p1_records[-1].components["vel_img"],
        **p2_summary,
    }
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        write_metrics_csv(os.path.join(outdir, "phase1_metrics.csv"), p1_records, PHASE1_COMPONENTS)
        write_metrics_csv(os.path.join(outdir, "phase2_metrics.csv"), p2_records, PHASE2_COMPONENTS)
        nn.save_checkpoint(os.path.join(outdir, "ckpt_vel_rex"), nets["rex"].params())
        nn.save_checkpoint(os.path.join(outdir, "ckpt_vel_img"), nets["img"].params())
        nn.save_checkpoint(os.path.join(outdir, "ckpt_student"), student.params())
        with open(os.path.join(outdir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    summary["nets"] = nets
    summary["student"] = student
    summary["teacher"] = teacher
    summary["phase1_records"] = p1_records
    summary["phase2_records"] = p2_records
    return summary
