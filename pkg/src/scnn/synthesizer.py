"""Synthesis of boundary-hardening samples.

A frozen classifier is composed with one differentiable manipulator per
sample; gradient descent on the manipulator parameters pulls each sample
toward the decision boundary between its true class and the nearest wrong
class. Samples in a batch are optimized together for throughput but remain
mathematically independent: the loss is additive across samples and every
update rule is elementwise, so results do not depend on how samples are
grouped or how many workers run.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, PROB_FLOOR, Tensor, cross_entropy
from .data import LabeledDataset, Provenance
from .manipulators import (
    MANIPULATOR_KINDS,
    AffineParams,
    DisplacementField,
    EraseMask,
    apply_manipulator,
    erase_apply,
    gaussian_kernel,
)
from .model import FrozenNetError


@dataclass(frozen=True)
class BoundaryTarget:
    """Per-sample target for the synthesis loss: the true label mixed with
    the nearest wrong label at a given strength."""

    label: int
    top1: int          # current argmax of the composed network
    runner_up: int     # second argmax, never equal to top1
    strength: float
    weights: np.ndarray  # length-K mixture; sums to 1 + strength unless normalized


@dataclass
class SynthesisConfig:
    manipulator: str = "round_robin"  # one kind, or round-robin over all three
    strength: float = 0.5
    max_steps: int = 40
    lr_affine: float = 0.05
    lr_grid: float = 0.1
    lr_erase: float = 0.1
    stop_rule: str = "stop_on_flip"  # fixed_steps | stop_on_flip | stop_on_margin
    margin_tau: float | None = 0.1
    normalize_targets: bool = False
    chunk_size: int = 64
    # displacement field knobs
    kernel_size: int = 9
    kernel_mu: float = 0.0
    kernel_sigma: float = 2.0
    amplitude: float = 0.1
    # erase mask knobs
    mask_n: int = 4
    erase_count: int = 2
    erase_mode: str = "zero"

    def __post_init__(self):
        if self.strength <= 0:
            raise ValueError(f"strength must be positive, got {self.strength}")
        if self.max_steps < 0:
            # 0 is the degenerate identity-synthesis case used by dry runs
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.stop_rule not in ("fixed_steps", "stop_on_flip", "stop_on_margin"):
            raise ValueError(f"unknown stop rule {self.stop_rule!r}")
        if self.stop_rule == "stop_on_margin" and self.margin_tau is None:
            raise ValueError("stop_on_margin needs margin_tau")
        if self.manipulator not in ("round_robin",) + MANIPULATOR_KINDS:
            raise ValueError(f"unknown manipulator {self.manipulator!r}")

    def learning_rate(self, kind):
        return {"affine": self.lr_affine, "grid": self.lr_grid, "erase": self.lr_erase}[kind]

    def kind_for(self, index):
        if self.manipulator == "round_robin":
            return MANIPULATOR_KINDS[index % len(MANIPULATOR_KINDS)]
        return self.manipulator


@dataclass
class SynthesisResult:
    image: np.ndarray          # the synthesized sample X'
    label: int                 # original label, always preserved
    prediction: int            # argmax on the final synthesized sample
    runner_up: int
    kind: str
    steps: int                 # optimizer updates taken before stopping
    flipped: bool
    loss_trajectory: list = field(default_factory=list)
    params: np.ndarray | None = None  # trainable values at stop
    aborted: bool = False
    index: int = -1


# -- targets and loss --------------------------------------------------------

def _targets_array(probs, labels, strength, normalize):
    """Vectorized target construction; returns (weights, top1, runner_up)."""
    k = probs.shape[1]
    top1 = probs.argmax(axis=1)
    masked = probs.copy()
    masked[np.arange(len(probs)), top1] = -np.inf
    runner_up = masked.argmax(axis=1)
    weights = np.zeros_like(probs)
    weights[np.arange(len(probs)), labels] = 1.0
    nearest_wrong = np.where(top1 == labels, runner_up, top1)
    weights[np.arange(len(probs)), nearest_wrong] += strength
    if normalize:
        weights /= 1.0 + strength
    return weights, top1, runner_up


def boundary_targets(probs, label, strength, normalize=False):
    """Target for one sample: argmax class, second argmax, and the weight
    vector onehot(label) + strength * onehot(nearest wrong). Argmax ties
    break toward the lowest class id."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise ValueError(f"need a probability vector of >= 2 classes, got shape {probs.shape}")
    weights, top1, runner_up = _targets_array(probs[None], np.asarray([label]), strength, normalize)
    return BoundaryTarget(label=int(label), top1=int(top1[0]), runner_up=int(runner_up[0]),
                          strength=strength, weights=weights[0])


def boundary_loss(probs, target_weights):
    """Cross-entropy of predicted probabilities against the (unnormalized)
    boundary target mixture; probabilities are floored at 1e-12."""
    w = target_weights.weights if isinstance(target_weights, BoundaryTarget) else target_weights
    return cross_entropy(probs, Tensor(np.asarray(w, dtype=probs.dtype)))


def _per_sample_loss(probs_data, weights):
    return -(weights * np.log(np.maximum(probs_data, PROB_FLOOR))).sum(axis=1)


def predict_manipulated(x, params, net):
    """Class probabilities of the manipulated input; the composition of the
    selected manipulator and the frozen classifier. Gradients flow only into
    the manipulator parameters."""
    if not net.frozen:
        raise FrozenNetError("synthesis requires a frozen classifier")
    out = apply_manipulator(x, params)
    if out.data.ndim == 3:
        out = out.reshape(1, *out.data.shape)
    return net.forward(out, training=False)


# -- inner optimization -------------------------------------------------------

def _init_group_params(kind, images, cfg, init_rngs, dtype):
    b, _, h, w = images.shape
    if kind == "affine":
        return AffineParams(residual=Tensor(np.zeros((b, 6), dtype=dtype), requires_grad=True))
    if kind == "grid":
        delta = np.stack([rng.uniform(-1.0, 1.0, size=(2, h, w)) for rng in init_rngs])
        kernel = gaussian_kernel(cfg.kernel_size, cfg.kernel_size, cfg.kernel_mu, cfg.kernel_sigma)
        return DisplacementField(delta=Tensor(delta.astype(dtype), requires_grad=True),
                                 kernel=kernel.astype(dtype), amplitude=cfg.amplitude)
    if kind == "erase":
        return EraseMask(logits=Tensor(np.zeros((b, cfg.mask_n, cfg.mask_n), dtype=dtype),
                                       requires_grad=True),
                         erase_count=cfg.erase_count, erase_mode=cfg.erase_mode)
    raise ValueError(f"unknown manipulator kind {kind!r}")


def _should_stop(cfg, flipped, margin):
    if cfg.stop_rule == "fixed_steps":
        return np.zeros_like(flipped)
    if cfg.margin_tau is None:
        return flipped.copy()
    return flipped | (margin <= cfg.margin_tau)


def _synthesize_group(images, labels, kind, net, cfg, seeds, indices):
    """Optimize one manipulator-kind group jointly; one result per sample."""
    b = len(images)
    rng_pairs = [np.random.SeedSequence(s).spawn(2) for s in seeds]
    init_rngs = [np.random.default_rng(p[0]) for p in rng_pairs]
    noise_rngs = [np.random.default_rng(p[1]) for p in rng_pairs]

    params = _init_group_params(kind, images, cfg, init_rngs, images.dtype)
    opt = Adam([params.trainable], lr=cfg.learning_rate(kind))
    x = Tensor(images)

    live = np.ones(b, dtype=bool)
    aborted = np.zeros(b, dtype=bool)
    steps_used = np.zeros(b, dtype=int)
    final_image = np.array(images, copy=True)
    final_probs = np.zeros((b, net.num_classes))
    final_params = np.zeros_like(params.trainable.data)
    trajectories = [[] for _ in range(b)]

    for step in range(cfg.max_steps + 1):
        out = apply_manipulator(x, params)
        probs = net.forward(out, training=False)
        pdata = probs.data
        weights, top1, _ = _targets_array(pdata, labels, cfg.strength, cfg.normalize_targets)
        losses = _per_sample_loss(pdata, weights)

        bad = live & ~np.isfinite(losses)
        if bad.any():
            aborted |= bad
            live &= ~bad

        for i in np.flatnonzero(live):
            trajectories[i].append(float(losses[i]))

        part = np.partition(pdata, -2, axis=1)
        margin = part[:, -1] - part[:, -2]
        flipped = top1 != labels
        newly_done = live & (_should_stop(cfg, flipped, margin) | (step == cfg.max_steps))
        if newly_done.any():
            final_image[newly_done] = out.data[newly_done]
            final_probs[newly_done] = pdata[newly_done]
            final_params[newly_done] = params.trainable.data[newly_done]
            steps_used[newly_done] = step
            live &= ~newly_done
        if not live.any():
            break

        loss = cross_entropy(probs, Tensor(weights.astype(pdata.dtype)))
        loss.backward()
        opt.step()

    results = []
    for i in range(b):
        if aborted[i]:
            results.append(SynthesisResult(
                image=images[i], label=int(labels[i]), prediction=-1, runner_up=-1,
                kind=kind, steps=int(steps_used[i]), flipped=False,
                loss_trajectory=trajectories[i], params=None, aborted=True,
                index=int(indices[i])))
            continue
        results.append(SynthesisResult(
            image=final_image[i], label=int(labels[i]), prediction=-1, runner_up=-1,
            kind=kind, steps=int(steps_used[i]), flipped=False,
            loss_trajectory=trajectories[i], params=final_params[i].copy(),
            index=int(indices[i])))

    # smart erasing ends with a hard erase of the most influential blocks;
    # the synthesized sample and its final prediction come from that image
    if kind == "erase":
        ok = np.flatnonzero(~aborted)
        if len(ok):
            hard = np.stack([
                erase_apply(images[i], EraseMask(logits=Tensor(final_params[i][None]),
                                                 erase_count=cfg.erase_count,
                                                 erase_mode=cfg.erase_mode),
                            rng=noise_rngs[i])
                for i in ok
            ])
            for row, i in enumerate(ok):
                results[i].image = hard[row]
            final_probs[ok] = net.forward(hard, training=False).data

    for i in range(b):
        if results[i].aborted:
            continue
        tgt = boundary_targets(final_probs[i], labels[i], cfg.strength)
        results[i].prediction = tgt.top1
        results[i].runner_up = tgt.runner_up
        results[i].flipped = tgt.top1 != labels[i]
    return results


def synthesize_sample(x, y, net, cfg, seed):
    """Synthesize one boundary-hardening variant of a single image."""
    if not net.frozen:
        raise FrozenNetError("synthesis requires a frozen classifier")
    images = np.asarray(x, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return _synthesize_group(images, np.asarray([y]), cfg.kind_for(0), net, cfg,
                             seeds=[_sample_seed(seed, 0, 0, 0)], indices=[0])[0]


def _sample_seed(seed, cycle, variant, index):
    return np.random.SeedSequence([seed, cycle, variant, index]).generate_state(4)


def _run_chunk(chunk, net, cfg):
    """One fixed chunk of tasks, grouped by manipulator kind."""
    order, images, labels, kinds, seeds = chunk
    results = [None] * len(order)
    for kind in MANIPULATOR_KINDS:
        rows = [i for i, k in enumerate(kinds) if k == kind]
        if not rows:
            continue
        group = _synthesize_group(images[rows], labels[rows], kind, net, cfg,
                                  seeds=[seeds[i] for i in rows],
                                  indices=[order[i] for i in rows])
        for slot, res in zip(rows, group):
            results[slot] = res
    return results


def synthesize_batch(dataset, net, cfg, workers=1, seed=0, cycle=0, variants_per_sample=1):
    """Synthesize one (or more) variants per input sample.

    Returns (synthesized LabeledDataset, list of SynthesisResult). Aborted
    samples are reported in the result list but excluded from the dataset.
    Chunking is fixed by input order, so any worker count produces the same
    output; each sample's initialization is seeded independently of grouping.
    """
    if not net.frozen:
        raise FrozenNetError("synthesis requires a frozen classifier")
    tasks = []
    for v in range(variants_per_sample):
        for i in range(len(dataset)):
            task_id = v * len(dataset) + i
            tasks.append((task_id, i, cfg.kind_for(task_id), _sample_seed(seed, cycle, v, i)))

    chunks = []
    for start in range(0, len(tasks), cfg.chunk_size):
        part = tasks[start:start + cfg.chunk_size]
        order = [t[0] for t in part]
        src = [t[1] for t in part]
        chunks.append((order,
                       dataset.images[src],
                       dataset.labels[src],
                       [t[2] for t in part],
                       [t[3] for t in part]))

    if workers <= 1 or len(chunks) <= 1:
        chunk_results = [_run_chunk(c, net, cfg) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunk_results = list(pool.map(lambda c: _run_chunk(c, net, cfg), chunks))

    results = [r for chunk in chunk_results for r in chunk]
    kept = [r for r in results if not r.aborted]
    if kept:
        out = LabeledDataset(
            images=np.stack([r.image for r in kept]),
            labels=np.asarray([r.label for r in kept]),
            num_classes=dataset.num_classes,
            provenance=[Provenance.synthesized(cycle, r.kind) for r in kept],
        )
    else:
        out = LabeledDataset(images=np.zeros((0,) + dataset.images.shape[1:]),
                             labels=np.zeros(0, dtype=np.int64),
                             num_classes=dataset.num_classes, provenance=[])
    return out, results


def flip_rate(results):
    kept = [r for r in results if not r.aborted]
    if not kept:
        return 0.0
    return sum(r.flipped for r in kept) / len(kept)


def write_synthesis_log(path, results, cycle):
    """Append one JSON line per synthesized sample: provenance plus how the
    inner optimization ended."""
    with open(path, "a") as fh:
        for r in results:
            fh.write(json.dumps({
                "cycle": cycle,
                "index": r.index,
                "kind": r.kind,
                "steps": r.steps,
                "label": r.label,
                "prediction": r.prediction,
                "runner_up": r.runner_up,
                "flipped": r.flipped,
                "aborted": r.aborted,
            }) + "\n")
