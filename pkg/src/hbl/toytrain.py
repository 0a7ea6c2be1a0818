"""Desk-scale quantization-aware training with a two-stage recipe.

Stage "a8" trains a tiny decoder from scratch with 8-bit activations;
stage "a4" continues from an a8 checkpoint with 4-bit activations,
reloading the Adam moments and step counter. The stage boundary also
switches the schedule: the learning rate restarts at a lower peak and
decays linearly, and weight decay drops to zero.

Everything is deterministic given the config seed: parameter init, data
generation (counter-based per step), and the single-threaded update loop.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tensor_io
from .errors import ConfigMismatchError, DivergedLossError
from .layers import BlockConfig, TransformerBlock, rmsnorm_backward, rmsnorm_forward

STAGES = ("a8", "a4")
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    """Model dimensions, two-stage schedule and data settings.

    The a4 stage is a short continuation: at most 10% of the total step
    budget, mirroring a 95/5 split of the training tokens.
    """

    layers: int = 2
    hidden: int = 64
    glu: int = 128
    heads: int = 4
    vocab: int = 16
    seq_len: int = 32
    batch: int = 32
    steps_a8: int = 2000
    steps_a4: int = 200
    lr_peak_a8: float = 8e-3
    lr_end_a8: float = 1.5e-3
    lr_peak_a4: float = 1.5e-3
    lr_end_a4: float = 5e-4
    weight_decay_a8: float = 0.1
    weight_decay_a4: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    warmup: int = 20
    grad_clip: float = 1.0
    seed: int = 0
    task: str = "copy"
    # Corruption probability of the source span in the copy task. A small
    # nonzero value gives the loss an irreducible floor, so "stage two lands
    # near stage one" is a meaningful comparison instead of noise around
    # machine zero.
    copy_noise: float = 0.005
    use_hadamard: bool = True
    rotate_weights: bool = False
    outlier_scale: float = 1.0
    outlier_channels: int = 0

    def __post_init__(self):
        if self.task not in ("copy", "modular-add"):
            raise ValueError(f"unknown task {self.task!r}")
        total = self.steps_a8 + self.steps_a4
        if self.steps_a4 > total * 0.10 + 1e-9:
            raise ValueError(
                f"steps_a4={self.steps_a4} exceeds 10% of the total budget {total}"
            )

    def block_config(self, act_bits: int) -> BlockConfig:
        return BlockConfig(
            hidden=self.hidden,
            glu=self.glu,
            heads=self.heads,
            act_bits=act_bits,
            use_hadamard=self.use_hadamard,
            rotate_weights=self.rotate_weights,
            outlier_scale=self.outlier_scale,
            outlier_channels=self.outlier_channels,
        )

    def arch_fields(self) -> dict:
        """The fields a resume checkpoint must agree on."""
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "glu": self.glu,
            "heads": self.heads,
            "vocab": self.vocab,
            "use_hadamard": self.use_hadamard,
            "rotate_weights": self.rotate_weights,
        }


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

MOD = 13


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic sample stream: batch for (seed, step) is reproducible."""

    kind: str
    vocab: int
    seq_len: int
    seed: int
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("copy", "modular-add"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "copy" and self.vocab < 3:
            raise ValueError("copy task needs vocab >= 3")
        if self.kind == "modular-add" and self.vocab < MOD:
            raise ValueError(f"modular-add task needs vocab >= {MOD}")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"noise must be in [0, 1), got {self.noise}")


def make_batch(task: SyntheticTask, batch: int, step: int):
    """Deterministic (tokens, targets, mask) for one step.

    tokens: (batch, seq) int64 inputs.
    targets: (batch, seq) int64, the token to predict at each position.
    mask: (batch, seq) float32, 1 where the loss is defined.

    copy: [p_0..p_{P-1}, SEP, p_0..p_{P-1}, SEP...]; after the separator
    the model must reproduce the payload, so targets at positions
    P..2P-1 are the payload again (next-token framing). With task.noise
    > 0 each source token is independently resampled with that
    probability (targets stay clean), giving the loss an irreducible
    floor.

    modular-add: pairs (x, y) fill the sequence; at each y position the
    target is (x + y) mod 13 (mapped-token framing).
    """
    rng = np.random.default_rng([task.seed, step])
    s = task.seq_len
    tokens = np.zeros((batch, s), dtype=np.int64)
    targets = np.zeros((batch, s), dtype=np.int64)
    mask = np.zeros((batch, s), dtype=np.float32)
    if task.kind == "copy":
        sep = task.vocab - 1
        payload_len = (s - 1) // 2
        payload = rng.integers(0, sep, size=(batch, payload_len))
        source = payload
        if task.noise > 0.0:
            corrupt = rng.random(size=payload.shape) < task.noise
            resampled = rng.integers(0, sep, size=payload.shape)
            source = np.where(corrupt, resampled, payload)
        tokens[:, :] = sep
        tokens[:, :payload_len] = source
        tokens[:, payload_len + 1 : 2 * payload_len + 1] = payload
        # predicting position j+1 from position j: the copy of p_i sits at
        # position payload_len + 1 + i, predicted from payload_len + i
        targets[:, payload_len : 2 * payload_len] = payload
        mask[:, payload_len : 2 * payload_len] = 1.0
    else:
        pairs = s // 2
        x = rng.integers(0, MOD, size=(batch, pairs))
        y = rng.integers(0, MOD, size=(batch, pairs))
        tokens[:, 0 : 2 * pairs : 2] = x
        tokens[:, 1 : 2 * pairs : 2] = y
        targets[:, 1 : 2 * pairs : 2] = (x + y) % MOD
        mask[:, 1 : 2 * pairs : 2] = 1.0
    return tokens, targets, mask


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class ToyModel:
    """Tiny pre-norm decoder: embedding, N blocks, final norm, logits head.

    The embedding and output head stay full precision; only the in-block
    projections are quantized.
    """

    def __init__(self, cfg: TrainConfig, act_bits: int):
        self.cfg = cfg
        self.act_bits = act_bits
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden
        self.embed = (rng.standard_normal((cfg.vocab, h)) * 0.02).astype(np.float32)
        self.blocks = [
            TransformerBlock(f"block{i}", cfg.block_config(act_bits), rng)
            for i in range(cfg.layers)
        ]
        self.g_final = np.ones(h, dtype=np.float32)
        self.head = (rng.standard_normal((cfg.vocab, h)) / np.sqrt(h)).astype(
            np.float32
        )
        self.g_embed = np.zeros_like(self.embed)
        self.gg_final = np.zeros_like(self.g_final)
        self.g_head = np.zeros_like(self.head)
        self._ctx = None

    def set_act_bits(self, act_bits: int) -> None:
        self.act_bits = act_bits
        for blk in self.blocks:
            blk.cfg.act_bits = act_bits

    def forward(self, tokens: np.ndarray, capture: dict | None = None) -> np.ndarray:
        b, s = tokens.shape
        x = self.embed[tokens]  # (b, s, h)
        for blk in self.blocks:
            x = blk.forward(x, capture=capture)
        x_flat = x.reshape(-1, self.cfg.hidden)
        hn, ln_ctx = rmsnorm_forward(x_flat, self.g_final)
        logits = hn @ self.head.T
        self._ctx = (tokens, ln_ctx, hn, (b, s))
        return logits.reshape(b, s, self.cfg.vocab)

    def backward(self, dlogits: np.ndarray) -> None:
        if self._ctx is None:
            raise ConfigMismatchError("forward before backward")
        tokens, ln_ctx, hn, (b, s) = self._ctx
        dl = dlogits.reshape(-1, self.cfg.vocab).astype(np.float32)
        self.g_head += dl.T @ hn
        dhn = dl @ self.head
        dx_flat, dgf = rmsnorm_backward(dhn, ln_ctx)
        self.gg_final += dgf
        dx = dx_flat.reshape(b, s, self.cfg.hidden)
        for blk in reversed(self.blocks):
            dx = blk.backward(dx)
        np.add.at(self.g_embed, tokens.reshape(-1), dx.reshape(-1, self.cfg.hidden))

    def params(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "g_final": self.g_final, "head": self.head}
        for blk in self.blocks:
            out.update(blk.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {"embed": self.g_embed, "g_final": self.gg_final, "head": self.g_head}
        for blk in self.blocks:
            out.update(blk.grads())
        return out

    def zero_grads(self) -> None:
        self.g_embed[...] = 0.0
        self.gg_final[...] = 0.0
        self.g_head[...] = 0.0
        for blk in self.blocks:
            blk.zero_grads()

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(values):
            raise ConfigMismatchError(
                f"parameter names differ: {sorted(set(own) ^ set(values))}"
            )
        for name, arr in own.items():
            src = values[name]
            if src.shape != arr.shape:
                raise ConfigMismatchError(
                    f"{name}: shape {src.shape} != expected {arr.shape}"
                )
            arr[...] = src


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def masked_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean token-level cross-entropy over masked positions, plus dlogits."""
    b, s, v = logits.shape
    flat = logits.reshape(-1, v).astype(np.float64)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    idx = targets.reshape(-1)
    m = mask.reshape(-1)
    count = m.sum()
    nll = -(logp[np.arange(idx.size), idx] * m).sum() / count
    probs = np.exp(logp)
    donehot = probs
    donehot[np.arange(idx.size), idx] -= 1.0
    dlogits = (donehot * (m / count)[:, None]).reshape(b, s, v).astype(np.float32)
    return float(nll), dlogits


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, param_names, shapes, beta1, beta2, eps):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(shapes[n], dtype=np.float32) for n in param_names}
        self.v = {n: np.zeros(shapes[n], dtype=np.float32) for n in param_names}

    def step(self, params: dict, grads: dict, lr: float, weight_decay: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name in sorted(params):
            p, g = params[name], grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            mhat = m / bias1
            vhat = v / bias2
            if weight_decay:
                p *= 1.0 - lr * weight_decay
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = np.float32(max_norm / (norm + 1e-12))
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def lr_at(cfg: TrainConfig, stage: str, step: int) -> float:
    """Two-stage schedule: warmup + linear decay, then a lower linear leg."""
    if stage == "a8":
        if step < cfg.warmup:
            return cfg.lr_peak_a8 * (step + 1) / cfg.warmup
        span = max(cfg.steps_a8 - cfg.warmup, 1)
        frac = (step - cfg.warmup) / span
        return cfg.lr_peak_a8 + (cfg.lr_end_a8 - cfg.lr_peak_a8) * frac
    span = max(cfg.steps_a4, 1)
    frac = step / span
    return cfg.lr_peak_a4 + (cfg.lr_end_a4 - cfg.lr_peak_a4) * frac


def wd_at(cfg: TrainConfig, stage: str) -> float:
    return cfg.weight_decay_a8 if stage == "a8" else cfg.weight_decay_a4


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path, model: ToyModel, opt: AdamW, cfg: TrainConfig, stage: str, step: int
) -> None:
    """Write manifest.json plus one .bnt per parameter and moment tensor.

    Only the full-precision latent weights are stored; quantized forms are
    derived on the fly and never persisted.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = model.params()
    entries = {}
    opt_entries = {}
    for name in sorted(params):
        fname = name.replace("/", "_") + ".bnt"
        tensor_io.save(tensor_io.Tensor.from_array(params[name]), path / fname)
        entries[name] = fname
        m_name = name + ".adam_m.bnt"
        v_name = name + ".adam_v.bnt"
        tensor_io.save(tensor_io.Tensor.from_array(opt.m[name]), path / m_name)
        tensor_io.save(tensor_io.Tensor.from_array(opt.v[name]), path / v_name)
        opt_entries[name] = [m_name, v_name]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "stage": stage,
        "step": step,
        "adam_step": opt.t,
        "params": entries,
        "optimizer": opt_entries,
    }
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path: str | Path):
    """Returns (manifest, params dict, adam moments (m, v), adam step)."""
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    params = {
        name: tensor_io.load(path / fname).data.copy()
        for name, fname in manifest["params"].items()
    }
    m = {}
    v = {}
    for name, (m_file, v_file) in manifest["optimizer"].items():
        m[name] = tensor_io.load(path / m_file).data.copy()
        v[name] = tensor_io.load(path / v_file).data.copy()
    return manifest, params, (m, v), manifest["adam_step"]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    stage: str
    losses: list[float]
    lrs: list[float]
    wds: list[float]
    checkpoint: Path | None
    final_loss: float

    def curve_rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (i, self.losses[i], self.lrs[i], self.wds[i])
            for i in range(len(self.losses))
        ]


def smoothed_final_loss(losses: list[float], window: int = 25) -> float:
    """Mean loss over the last `window` steps: the curve's noise-robust tail."""
    tail = losses[-window:] if len(losses) >= window else losses
    return float(np.mean(tail))


def write_curve_csv(path: str | Path, result: TrainResult) -> None:
    with open(path, "w") as f:
        f.write("step,loss,lr,wd\n")
        for step, loss, lr, wd in result.curve_rows():
            f.write(f"{step},{loss!r},{lr!r},{wd!r}\n")


def _check_resume(manifest: dict, cfg: TrainConfig) -> None:
    saved_cfg = manifest["config"]
    for key, val in cfg.arch_fields().items():
        if saved_cfg.get(key) != val:
            raise ConfigMismatchError(
                f"checkpoint {key}={saved_cfg.get(key)} does not match config {key}={val}"
            )


def train_stage(
    cfg: TrainConfig,
    stage: str,
    resume: str | Path | None = None,
    out_dir: str | Path | None = None,
    reset_optimizer: bool = False,
) -> TrainResult:
    """Run one training stage and return the loss curve plus a checkpoint.

    Stage "a4" requires an a8 checkpoint to resume from; the Adam moments
    and step counter are reloaded so continuation picks up where stage one
    left off (`reset_optimizer=True` drops them, for measuring the value
    of reuse). Raises DivergedLossError the moment the loss stops being
    finite; the partial curve rides along on the exception.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    act_bits = 8 if stage == "a8" else 4
    steps = cfg.steps_a8 if stage == "a8" else cfg.steps_a4

    model = ToyModel(cfg, act_bits)
    opt = AdamW(
        list(model.params()),
        {n: p.shape for n, p in model.params().items()},
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    )
    step_offset = 0
    if stage == "a4":
        if resume is None:
            raise ConfigMismatchError("stage a4 requires an a8 resume checkpoint")
        manifest, params, (m, v), adam_t = load_checkpoint(resume)
        if manifest["stage"] != "a8":
            raise ConfigMismatchError(
                f"stage a4 must resume an a8 checkpoint, found stage {manifest['stage']!r}"
            )
        _check_resume(manifest, cfg)
        model.set_params(params)
        step_offset = manifest["step"]
        if not reset_optimizer:
            opt.m = m
            opt.v = v
            opt.t = adam_t
    elif resume is not None:
        manifest, params, (m, v), adam_t = load_checkpoint(resume)
        _check_resume(manifest, cfg)
        model.set_params(params)
        step_offset = manifest["step"]
        if not reset_optimizer:
            opt.m = m
            opt.v = v
            opt.t = adam_t

    noise = cfg.copy_noise if cfg.task == "copy" else 0.0
    task = SyntheticTask(cfg.task, cfg.vocab, cfg.seq_len, cfg.seed, noise)
    losses: list[float] = []
    lrs: list[float] = []
    wds: list[float] = []
    # diverging runs overflow in the forward pass before the loss turns
    # NaN; the loss check below is the divergence contract, so the numpy
    # warnings en route are suppressed
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            tokens, targets, mask = make_batch(task, cfg.batch, step_offset + step)
            logits = model.forward(tokens)
            loss, dlogits = masked_cross_entropy(logits, targets, mask)
            lr = lr_at(cfg, stage, step)
            wd = wd_at(cfg, stage)
            losses.append(loss)
            lrs.append(lr)
            wds.append(wd)
            if not np.isfinite(loss):
                raise DivergedLossError(step, losses)
            model.zero_grads()
            model.backward(dlogits)
            grads = model.grads()
            clip_global_norm(grads, cfg.grad_clip)
            opt.step(model.params(), grads, lr, wd)

    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = out_dir / f"checkpoint_{stage}"
        save_checkpoint(checkpoint, model, opt, cfg, stage, step_offset + steps)
    result = TrainResult(
        stage=stage,
        losses=losses,
        lrs=lrs,
        wds=wds,
        checkpoint=checkpoint,
        final_loss=smoothed_final_loss(losses),
    )
    if out_dir is not None:
        write_curve_csv(Path(out_dir) / f"loss_{stage}.csv", result)
    return result


# ---------------------------------------------------------------------------
# Held-out evaluation
# ---------------------------------------------------------------------------

EVAL_SEED_OFFSET = 999_983  # keeps eval batches disjoint from training steps


def evaluate(model: ToyModel, cfg: TrainConfig, n_batches: int = 50) -> float:
    """Mean loss over a fixed held-out batch stream (forward only).

    Every model evaluated under the same config sees identical batches, so
    model comparisons are paired and the task's irreducible noise cancels.
    """
    noise = cfg.copy_noise if cfg.task == "copy" else 0.0
    task = SyntheticTask(cfg.task, cfg.vocab, cfg.seq_len, cfg.seed + EVAL_SEED_OFFSET, noise)
    total = 0.0
    for step in range(n_batches):
        tokens, targets, mask = make_batch(task, cfg.batch, step)
        logits = model.forward(tokens)
        loss, _ = masked_cross_entropy(logits, targets, mask)
        total += loss
    return total / n_batches


def load_model(checkpoint: str | Path, cfg: TrainConfig, act_bits: int) -> ToyModel:
    """Rebuild a model from a checkpoint at the given activation width."""
    manifest, params, _, _ = load_checkpoint(checkpoint)
    _check_resume(manifest, cfg)
    model = ToyModel(cfg, act_bits)
    model.set_params(params)
    return model


# ---------------------------------------------------------------------------
# Rotation ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("no_rotation", False, False),
    ("activation_rotation", True, False),
    ("weight_activation_rotation", True, True),
)


def run_ablation(cfg: TrainConfig, work_dir: str | Path) -> dict:
    """Train the three rotation variants through both stages on shared data.

    Each variant trains its own a8 stage and then continues at a4; seeds
    and the data stream are identical across variants. Divergence is
    caught and reported, never raised.
    """
    work_dir = Path(work_dir)
    report: dict = {"task": cfg.task, "seed": cfg.seed, "variants": {}}
    for name, use_h, rot_w in ABLATION_VARIANTS:
        variant_cfg = replace(cfg, use_hadamard=use_h, rotate_weights=rot_w)
        variant_dir = work_dir / name
        entry: dict = {"use_hadamard": use_h, "rotate_weights": rot_w}
        try:
            a8 = train_stage(variant_cfg, "a8", out_dir=variant_dir)
            entry["a8_final_loss"] = a8.final_loss
            entry["a8_diverged"] = False
        except DivergedLossError as e:
            entry["a8_final_loss"] = None
            entry["a8_diverged"] = True
            entry["a8_diverged_step"] = e.step
            entry["a4_final_loss"] = None
            entry["a4_diverged"] = True
            report["variants"][name] = entry
            continue
        try:
            a4 = train_stage(
                variant_cfg, "a4", resume=a8.checkpoint, out_dir=variant_dir
            )
            entry["a4_final_loss"] = a4.final_loss
            entry["a4_diverged"] = False
            model = load_model(a4.checkpoint, variant_cfg, act_bits=4)
            entry["a4_eval_loss"] = evaluate(model, variant_cfg)
        except DivergedLossError as e:
            entry["a4_final_loss"] = None
            entry["a4_eval_loss"] = None
            entry["a4_diverged"] = True
            entry["a4_diverged_step"] = e.step
        report["variants"][name] = entry
    return report
