"""Sign-descent tuning of rounding offsets and scale multipliers.

Each transformer block (or MLP layer, which is its own block) is tuned
in isolation: quantized-forward block output is regressed onto the
full-precision block output under a trimmed squared-error objective.
Parameters move by a fixed step in the direction opposite the gradient
sign, clamped to their boxes, and the best iterate seen wins.

``quantize_model`` strings the blocks together: activation statistics,
searched initial scales, per-block tuning with optional quantized-input
propagation, head quantization, and packing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import codecs, scale_init
from . import tensor as T
from .errors import ConfigError, ContractError, NumericError, ShapeError

RECIPES = {
    "default": dict(steps=200, lr_mult=1.0, calib_samples=128),
    "enhanced": dict(steps=500, lr_mult=2.0, calib_samples=512),
}


@dataclass(frozen=True)
class TuneConfig:
    steps: int = 200
    lr: float | None = None  # resolved to 1/steps when omitted
    batch_size: int = 8
    seq_len: int = 64
    calib_samples: int = 128
    trim_fraction: float = 0.001
    use_scale_init: bool = True
    propagate_quantized: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr is None:
            object.__setattr__(self, "lr", 1.0 / max(self.steps, 1))
        if self.steps < 0:
            raise ConfigError("steps must be >= 0 (0 disables tuning)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ConfigError("trim_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.calib_samples < 1:
            raise ConfigError("calib_samples must be >= 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def recipe(name: str = "default", **overrides) -> TuneConfig:
    """Named tuning recipe; explicit overrides always win.

    ``lr`` follows the (possibly overridden) step count unless set
    directly: 1/steps for "default", 2/steps for "enhanced".
    """
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; have {sorted(RECIPES)}")
    base = RECIPES[name]
    kw = dict(steps=base["steps"], calib_samples=base["calib_samples"])
    kw.update(overrides)
    if "lr" not in overrides:
        kw["lr"] = base["lr_mult"] / max(kw["steps"], 1)
    return TuneConfig(**kw)


def trimmed_mse(pred: T.Tensor, target, trim_fraction: float = 0.0) -> T.Tensor:
    """Sum of squared errors with the floor(frac*n) largest dropped.

    Ties at the cut sort stably, so among equal errors the later flat
    positions are dropped first. Gradients flow only through survivors.
    """
    tgt = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
    if not 0.0 <= trim_fraction < 1.0:
        raise ContractError("trim_fraction must lie in [0, 1)")
    diff = T.sub(pred, T.Tensor(tgt))
    sq = T.mul(diff, diff)
    k = int(math.floor(trim_fraction * sq.data.size))
    if k == 0:
        return T.sum_(sq)
    order = np.argsort(sq.data.ravel(), kind="stable")
    mask = np.ones(sq.data.size)
    mask[order[sq.data.size - k:]] = 0.0
    return T.sum_(T.mul(sq, T.Tensor(mask.reshape(sq.shape))))


@dataclass
class TunedLayer:
    name: str
    v: np.ndarray      # per-element rounding offset in [-0.5, 0.5]
    alpha: np.ndarray  # per-group scale multiplier in [0.5, 1.5]
    beta: np.ndarray   # minmax-mode lower-range multiplier; ones when inert


@dataclass
class BlockTuneResult:
    block: int
    layers: list
    initial_loss: float
    final_loss: float
    best_step: int
    history: list = field(repr=False)


def _block_apply(model, block, x, overrides=None, chunk=8):
    outs = []
    for i in range(0, x.shape[0], chunk):
        outs.append(model.block_forward(block, x[i:i + chunk],
                                        overrides=overrides).data)
    return np.concatenate(outs, axis=0)


def tune_block(model, block: int, inputs, schemes: dict, cfg: TuneConfig, *,
               init_scales: dict | None = None,
               targets=None) -> BlockTuneResult:
    """Tune one block's integer-grid layers against its fp outputs.

    ``inputs`` are the block's input activations, (samples, ...); the
    regression targets default to the full-precision block outputs on
    those inputs. Microscaling layers in ``schemes`` ride along frozen
    at their rounded values; 16-bit layers stay full precision.
    """
    if cfg.steps < 1:
        raise ContractError("tuning needs at least one step")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] < 1:
        raise ContractError("no calibration inputs")
    names = [n for n in model.block_layer_names(block) if n in schemes]
    unknown = set(schemes) - set(names)
    if unknown:
        raise ContractError(f"layers {sorted(unknown)} not in block {block}")
    tuned_names = [n for n in names if schemes[n].family == "int-sym"]
    if not tuned_names:
        raise ContractError(f"block {block} has no tunable layers")

    frozen = {}
    for n in names:
        if schemes[n].family == "mxfp":
            frozen[n] = codecs.mx_qdq_weight(model.params[n],
                                             schemes[n].mx_format)[0]
    if targets is None:
        targets = _block_apply(model, block, inputs)
    else:
        targets = np.asarray(targets, dtype=np.float64)

    s_init = init_scales or {}
    theta = {}
    for n in tuned_names:
        w = model.params[n]
        n_g = len(codecs.group_segments(w.shape[0], schemes[n].group_size))
        theta[n] = {"v": np.zeros_like(w, dtype=np.float64),
                    "alpha": np.ones((n_g, w.shape[1])),
                    "beta": np.ones((n_g, w.shape[1]))}

    rng = np.random.default_rng((cfg.seed, block))
    n_samples = inputs.shape[0]
    take = min(cfg.batch_size, n_samples)
    history = []
    best = None
    # steps updates, steps+1 evaluations: every iterate is measured
    for step in range(cfg.steps + 1):
        idx = rng.choice(n_samples, size=take, replace=False)
        over = dict(frozen)
        leaves = {}
        for n in tuned_names:
            th = theta[n]
            sch = schemes[n]
            v = T.Tensor(th["v"], requires_grad=True)
            a = T.Tensor(th["alpha"], requires_grad=True)
            s0 = s_init.get(n)
            if s0 is None:
                b = T.Tensor(th["beta"], requires_grad=True)
                over[n] = codecs.uniform_qdq_graph(
                    model.params[n], sch.bits, sch.group_size, v, a, b)
                leaves[n] = (v, a, b)
            else:
                over[n] = codecs.uniform_qdq_graph(
                    model.params[n], sch.bits, sch.group_size, v, a,
                    T.Tensor(th["beta"]), init_scales=s0)
                leaves[n] = (v, a, None)
        out = model.block_forward(block, inputs[idx], overrides=over)
        loss = trimmed_mse(out, targets[idx], cfg.trim_fraction)
        lval = loss.item()
        if not np.isfinite(lval):
            raise NumericError(
                f"non-finite tuning loss at step {step} in block {block}")
        history.append(lval)
        if best is None or lval < best[0]:
            best = (lval, step,
                    {n: {k: arr.copy() for k, arr in th.items()}
                     for n, th in theta.items()})
        if step == cfg.steps:
            break
        wrt = [t for trio in leaves.values() for t in trio if t is not None]
        grads = T.backward(loss, wrt=wrt)
        for n in tuned_names:
            v, a, b = leaves[n]
            th = theta[n]
            th["v"] = np.clip(th["v"] - cfg.lr * np.sign(grads[v]), -0.5, 0.5)
            th["alpha"] = np.clip(th["alpha"] - cfg.lr * np.sign(grads[a]),
                                  0.5, 1.5)
            if b is not None:
                th["beta"] = np.clip(th["beta"] - cfg.lr * np.sign(grads[b]),
                                     0.5, 1.5)

    best_loss, best_step, best_theta = best
    layers = [TunedLayer(n, best_theta[n]["v"], best_theta[n]["alpha"],
                         best_theta[n]["beta"]) for n in tuned_names]
    return BlockTuneResult(block, layers, history[0], best_loss, best_step,
                           history)


def plan_from_assignment(names, bits, family: str,
                         group_size: int = 32) -> dict:
    """Map layer names to schemes for a per-layer bit assignment."""
    names = list(names)
    bits = list(bits)
    if len(names) != len(bits):
        raise ContractError(f"{len(names)} names but {len(bits)} bit choices")
    return {n: codecs.scheme_for_bits(family, b, group_size)
            for n, b in zip(names, bits)}


@dataclass
class QuantizeResult:
    plan: dict
    weights: dict       # name -> final dequantized weight
    packed: dict        # name -> PackedWeights
    tuned: list         # BlockTuneResult per tuned block
    init_scales: dict   # name -> searched (n_groups, out) scales
    metrics: dict


def _finalize_layer(w, scheme, tl: TunedLayer | None, s_init):
    if scheme.family == "mxfp":
        deq, codes, exps = codecs.mx_qdq_weight(w, scheme.mx_format)
        return deq, codecs.pack_layer(deq.T, scheme, codes, exps)
    deq, codes, scales = codecs.quantize_weight(
        w, scheme.bits, scheme.group_size,
        v=tl.v if tl else None,
        alpha=tl.alpha if tl else 1.0,
        beta=tl.beta if tl else 1.0,
        init_scales=s_init)
    return deq, codecs.pack_layer(deq, scheme, codes, scales)


def quantize_model(model, plan: dict, calib_batches, cfg: TuneConfig,
                   eval_batches=None) -> QuantizeResult:
    """Quantize a model per a layer->scheme plan.

    Blocks containing integer-grid layers are tuned (unless steps is 0);
    layers outside any block, the head included, are quantized directly.
    When ``cfg.propagate_quantized`` is set, each block is tuned on
    inputs produced by the already-quantized blocks before it.
    """
    for name, sch in plan.items():
        info = model.layer_info(name)
        if info.kind != "linear":
            raise ContractError(
                f"layer {name!r} is {info.kind}; only linear layers quantize")
    effective = {n: s for n, s in plan.items() if s.family != "none"}

    init_scales = {}
    if cfg.use_scale_init and any(s.family == "int-sym"
                                  for s in effective.values()):
        stats = scale_init.calibrate_act_stats(model, calib_batches)
        for n, sch in effective.items():
            if sch.family == "int-sym":
                w = model.params[n]
                init_scales[n] = scale_init.search_layer_scales(
                    w, stats.get(n, w.shape[0]), sch.bits, sch.group_size)

    weights = {}
    packed = {}
    tuned = []
    ids = np.concatenate([np.asarray(b) for b in calib_batches], axis=0)
    x = model.embed_forward(ids)
    covered = set()
    for block in model.block_ids():
        bnames = [n for n in model.block_layer_names(block) if n in effective]
        covered.update(model.block_layer_names(block))
        tunable = [n for n in bnames if effective[n].family == "int-sym"]
        tune_res = None
        if tunable and cfg.steps >= 1:
            sub = {n: init_scales[n] for n in tunable if n in init_scales}
            tune_res = tune_block(model, block, x,
                                  {n: effective[n] for n in bnames}, cfg,
                                  init_scales=sub or None)
            tuned.append(tune_res)
        by_name = {lay.name: lay for lay in tune_res.layers} if tune_res else {}
        for n in bnames:
            weights[n], packed[n] = _finalize_layer(
                model.params[n], effective[n], by_name.get(n),
                init_scales.get(n))
        if cfg.propagate_quantized and bnames:
            x = _block_apply(model, block, x,
                             {n: weights[n] for n in bnames})
        else:
            x = _block_apply(model, block, x)

    for n, sch in effective.items():
        if n in covered:
            continue
        weights[n], packed[n] = _finalize_layer(model.params[n], sch, None,
                                                init_scales.get(n))

    metrics = {}
    if eval_batches is not None:
        metrics["fp_loss"] = model.eval_loss(eval_batches)
        metrics["quantized_loss"] = model.eval_loss(
            eval_batches, weights=weights or None)
    return QuantizeResult(plan, weights, packed, tuned, init_scales, metrics)
