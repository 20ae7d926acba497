"""
dedetr - Oracle self-test suite.

Each check compares a kernel against an independent oracle (brute force,
naive loops, hand-derived values) and fails with a message on mismatch.
"""

import itertools
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_dict
from .errors import AugmentationError, DedetrError
from .evaluation import compute_ap, compute_pr
from .geometry import giou, iou, nms
from .models import Box, BoxFormat, Detection, LabelSet
from .sampling import (
    FeatureMap,
    FeaturePyramid,
    bilinear_sample,
    build_multiscale_kv,
    grid_points,
    roi_align,
    roi_sample_points,
    sine_pos_embed,
)
from .scenes import gen_scene
from .supervision import (
    assign_labels,
    augment_fixed_ratio,
    augment_fixed_repeat,
    hungarian,
    set_loss,
)
from .tensor import Tensor
from .transformer import DecoderLayer, DetectionTransformer, ParamFactory

logger = logging.getLogger(__name__)


class CheckFailed(Exception):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


CHECKS: Dict[str, Callable[[], str]] = {}


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def expect(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailed(message)


def tiny_config(**model_overrides) -> RunConfig:
    """Smallest configuration that still exercises every decoder path."""
    model = {"num_queries": 4, "hidden_dim": 16, "num_heads": 2, "enc_layers": 1,
             "dec_layers": 2, "num_classes": 3, "in_channels": 8, "roi_resolution": 2}
    model.update(model_overrides)
    return config_from_dict({
        "model": model,
        "data": {"scene": {"image_size": 64, "num_classes": 3, "max_objects": 2,
                           "channels": 8, "scale_range": [0.1, 0.5]},
                 "train_count": 8, "eval_count": 4},
        "optimizer": {"epochs": 1, "batch_size": 4},
    })


# ---------------------------------------------------------------------------
# supervision
# ---------------------------------------------------------------------------

def brute_force_assignment(cost: np.ndarray) -> float:
    rows, cols = cost.shape
    perms = np.array(list(itertools.permutations(range(cols), rows)), dtype=np.int64)
    return float(cost[np.arange(rows), perms].sum(axis=1).min())


@check("hungarian_bruteforce")
def check_hungarian_bruteforce() -> str:
    rng = np.random.default_rng(0)
    trials = 1000
    for trial in range(trials):
        cols = int(rng.integers(1, 9))
        rows = int(rng.integers(0, min(cols, 7) + 1))
        cost = rng.uniform(-5.0, 5.0, size=(rows, cols))
        got = hungarian(cost)
        expect(sorted(got.pairs) == list(range(rows)), f"trial {trial}: incomplete assignment")
        expect(len(set(got.pairs.values())) == rows, f"trial {trial}: not injective")
        if rows:
            best = brute_force_assignment(cost)
            expect(abs(got.total_cost - best) < 1e-9,
                   f"trial {trial}: cost {got.total_cost} vs optimum {best}")
    example = hungarian(np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]))
    expect(example.pairs == {0: 1, 1: 0, 2: 2} and example.total_cost == 5.0,
           f"worked example gave {example.pairs} cost {example.total_cost}")
    return f"{trials} random matrices match brute force"


@check("hungarian_scale_invariance")
def check_hungarian_scale() -> str:
    rng = np.random.default_rng(1)
    for trial in range(200):
        cost = rng.uniform(0, 1, size=(4, 6))
        expect(hungarian(cost).pairs == hungarian(cost * 10.0).pairs,
               f"trial {trial}: scaling changed the assignment")
    return "200 matrices"


@check("augmentation_invariants")
def check_augmentation() -> str:
    rng = np.random.default_rng(2)
    for trial in range(200):
        n = int(rng.integers(4, 30))
        m = int(rng.integers(1, min(n, 8) + 1))
        labels = LabelSet([(int(rng.integers(3)), Box((0.5, 0.5, 0.2, 0.2)))
                           for _ in range(m)], n)
        for repeat in range(1, 5):
            if repeat * m > n:
                try:
                    augment_fixed_repeat(labels, repeat)
                except AugmentationError:
                    continue
                raise CheckFailed(f"trial {trial}: R={repeat} M={m} N={n} accepted")
            aug = augment_fixed_repeat(labels, repeat)
            expect(aug.counts() == [repeat] * m, f"trial {trial}: repeat counts {aug.counts()}")
        ratio = float(rng.uniform(0.05, 1.0))
        aug = augment_fixed_ratio(labels, ratio, seed=trial)
        counts = aug.counts()
        expect(len(aug.entries) == max(math.floor(n * ratio + 1e-9), m),
               f"trial {trial}: ratio total {len(aug.entries)}")
        expect(max(counts) - min(counts) <= 1 and min(counts) >= 1,
               f"trial {trial}: unbalanced ratio counts {counts}")
        expect(augment_fixed_ratio(labels, ratio, seed=trial).counts() == counts,
               f"trial {trial}: ratio augmentation not deterministic")
    return "fixed repeat and fixed ratio over 200 label sets"


# ---------------------------------------------------------------------------
# geometry and sampling
# ---------------------------------------------------------------------------

@check("giou_values")
def check_giou() -> str:
    a = Box((0, 0, 2, 2), BoxFormat.XYXY)
    expect(abs(giou(a, a) - 1.0) < 1e-12, "identical boxes")
    expect(abs(iou(a, Box((1, 1, 3, 3), BoxFormat.XYXY)) - 1.0 / 7.0) < 1e-12, "overlap iou")
    expect(abs(giou(a, Box((3, 0, 5, 2), BoxFormat.XYXY)) + 0.2) < 1e-12, "disjoint giou")
    return "hand-computed IoU / GIoU"


def _plain_iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a.values
    bx, by, bw, bh = b.values
    ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def greedy_nms_reference(dets: Sequence[Detection], threshold: float) -> List[int]:
    """Textbook greedy suppression over cxcywh boxes; returns kept input indices."""
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [i for i in remaining
                     if dets[i].class_id != dets[best].class_id
                     or _plain_iou(dets[best].box, dets[i].box) <= threshold]
    return keep


def naive_nms_violations(dets: Sequence[Detection], kept: Sequence[Detection],
                         threshold: float) -> Optional[str]:
    position = {id(d): i for i, d in enumerate(dets)}
    kept_ids = {id(k) for k in kept}
    for a, b in itertools.combinations(kept, 2):
        if a.class_id == b.class_id and iou(a.box, b.box) > threshold:
            return "two kept detections overlap above the threshold"
    for i, det in enumerate(dets):
        if id(det) in kept_ids:
            continue
        if not any(k.class_id == det.class_id and iou(k.box, det.box) > threshold and
                   (k.score, -position[id(k)]) >= (det.score, -i) for k in kept):
            return f"detection {i} dropped without a stronger overlapping survivor"
    return None


def random_detections(rng: np.random.Generator) -> List[Detection]:
    dets = []
    for _ in range(int(rng.integers(1, 15))):
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        w, h = rng.uniform(0.1, 0.4, size=2)
        score = float(rng.choice([0.5, rng.uniform()]))
        dets.append(Detection(Box((cx, cy, w, h)), int(rng.integers(2)), score))
    return dets


NMS_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)


@check("nms_oracle")
def check_nms() -> str:
    rng = np.random.default_rng(3)
    sets = 100
    for threshold in NMS_THRESHOLDS:
        for trial in range(sets):
            dets = random_detections(rng)
            kept = nms(dets, threshold)
            want = [id(dets[i]) for i in greedy_nms_reference(dets, threshold)]
            expect([id(d) for d in kept] == want,
                   f"threshold {threshold} set {trial}: differs from greedy reference")
            again = nms(kept, threshold)
            expect([id(d) for d in again] == [id(d) for d in kept],
                   f"threshold {threshold} set {trial}: not idempotent")
            problem = naive_nms_violations(dets, kept, threshold)
            expect(problem is None, f"threshold {threshold} set {trial}: {problem}")
    return f"{sets} random detection sets at each of {len(NMS_THRESHOLDS)} thresholds"


@check("roi_align_bilinear")
def check_roi_align() -> str:
    rng = np.random.default_rng(4)
    fmap = FeatureMap(Tensor(rng.normal(size=(6, 5, 3))), stride=8)
    boxes = np.array([[0.5, 0.5, 0.6, 0.4], [0.2, 0.8, 0.3, 0.3], [0.9, 0.1, 0.2, 0.2]])
    resolution = 3
    got = roi_align(fmap, boxes, resolution).data
    points = roi_sample_points(boxes, resolution)
    for n in range(boxes.shape[0]):
        for k in range(resolution * resolution):
            x, y = points[n, k]
            want = bilinear_sample(fmap, x * fmap.width, y * fmap.height)
            expect(np.allclose(got[n, k], want, atol=1e-12), f"box {n} bin {k} differs")
    # one bin over a box covering exactly one cell returns that cell
    cell = roi_align(fmap, np.array([[1.5 / 5, 2.5 / 6, 1 / 5, 1 / 6]]), 1).data[0, 0]
    expect(np.allclose(cell, fmap.values.data[2, 1]), "aligned single-cell box")
    return "RoIAlign matches pointwise bilinear sampling"


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@check("op_gradients")
def check_op_gradients() -> str:
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 3)))
    target = Tensor(rng.normal(size=(2, 3)))
    shift = Tensor([0.1, 0.1, 0.1])
    ones = Tensor([1.0, 1.0, 1.0])

    def composite(x: Tensor) -> Tensor:
        h = T.layer_norm(T.matmul(x, w))
        s = T.softmax(h) * T.sigmoid(h) + T.maximum(h, target) * 0.5
        return T.mean(T.abs(s - target)) + T.sum(T.log_softmax(h, axis=0)) * 0.1

    def reshaping(x: Tensor) -> Tensor:
        h = T.matmul(x, w)
        joined = T.concat([h, T.relu(h)], axis=0)
        picked = T.index(joined, (np.array([0, 2, 3]), np.array([1, 0, 2])))
        folded = T.reshape(T.transpose(h), (2, 3))
        return T.sum(picked * picked) + T.sum(T.scale(folded, -1.5) * h[0:2, 0:3])

    def squashing(x: Tensor) -> Tensor:
        h = T.matmul(x, w)
        logits = T.inverse_sigmoid(T.sigmoid(h) * 0.8 + shift)
        return T.sum(target / (h * h + ones)) + T.sum(T.minimum(logits, h) - logits * 0.25)

    x = Tensor(rng.normal(size=(2, 4)))
    worst = max(T.finite_diff_check(fn, x, h=1e-6) for fn in (composite, reshaping, squashing))
    expect(worst < 1e-5, f"op relative error {worst:.2e}")

    boxes = np.array([[0.45, 0.55, 0.5, 0.3], [0.85, 0.15, 0.4, 0.3]])
    channel_weights = Tensor(rng.normal(size=3))

    def sampled(values: Tensor) -> Tensor:
        return T.sum(roi_align(FeatureMap(values, 8), boxes, 3) * channel_weights)

    roi_err = T.finite_diff_check(sampled, Tensor(rng.normal(size=(8, 8, 3))), h=1e-6)
    expect(roi_err < 1e-5, f"roi_align relative error {roi_err:.2e}")
    return f"max relative error {max(worst, roi_err):.1e} (ops and roi_align)"


def _set_path(root, name: str, value) -> None:
    obj = root
    parts = name.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    setattr(obj, parts[-1], value)


@contextmanager
def bound_parameters(model, flat: Tensor):
    """Temporarily replace every parameter by a slice of one flat tensor."""
    named = list(model.named_parameters())
    offset = 0
    try:
        for name, p in named:
            size = p.data.size
            view = T.reshape(T.index(flat, slice(offset, offset + size)), p.dims)
            _set_path(model, name, view)
            offset += size
        yield
    finally:
        for name, p in named:
            _set_path(model, name, p)


def model_gradient_error(config: RunConfig, coords: int = 20, seed: int = 0) -> float:
    """Finite-difference check of the total loss over random parameter coordinates."""
    model = DetectionTransformer(config.model, seed)
    scene = gen_scene(config.data.scene, 0)
    labels = scene.labels_for(config.model.num_queries)
    frozen = model.sampling_boxes(scene.pyramid)
    with T.no_grad():
        outputs = model.forward(scene.pyramid, frozen)
        assignments = [assign_labels(labels, out, config.loss) for out in outputs]

    def loss_of(flat: Tensor) -> Tensor:
        with bound_parameters(model, flat):
            outs = model.forward(scene.pyramid, frozen)
            return set_loss(outs, labels, config.loss, assignments)[0]

    flat = Tensor(np.concatenate([p.data.ravel() for p in model.parameters()]))
    picked = np.random.default_rng(seed).choice(flat.data.size, size=coords, replace=False)
    return T.finite_diff_check(loss_of, flat, h=1e-6, coords=picked)


@check("model_gradient")
def check_model_gradient() -> str:
    err = model_gradient_error(tiny_config())
    expect(err < 1e-3, f"relative error {err:.2e} over 20 parameters")
    return f"max relative error {err:.1e} over 20 parameters"


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def aligned_attention_gap(seed: int = 6) -> float:
    """
    Largest difference between sparse cross-attention over RoI samples and
    dense cross-attention masked to the same cells, for boxes whose bin
    centres sit on cell centres.
    """
    rng = np.random.default_rng(seed)
    config = tiny_config().model
    dim, side, stride = config.hidden_dim, 4, 16
    layer = DecoderLayer(config, ParamFactory(seed))
    memory = Tensor(rng.normal(size=(side * side, dim)))
    pos = sine_pos_embed(grid_points(side, side), dim)
    pyramid = FeaturePyramid([FeatureMap(Tensor(rng.normal(size=(side, side, dim))), stride)],
                             side * stride, encoded_top=memory, pos_top=pos)
    # 2x2 bins over 2x2-cell boxes, and one whole-image box at 4x4
    boxes = np.array([[0.25, 0.25, 0.5, 0.5], [0.75, 0.5, 0.5, 0.5], [0.5, 0.75, 0.5, 0.5]])
    content = Tensor(rng.normal(size=(3, dim)))
    query_pos = Tensor(rng.normal(size=(3, dim)))

    kv = build_multiscale_kv(pyramid, boxes, 2, [0])
    sparse = layer.forward_sparse(content, query_pos, kv).data
    mask = np.zeros((3, side * side), dtype=bool)
    for n, (cx, cy, w, h) in enumerate(boxes):
        for i in range(side):
            for j in range(side):
                x, y = (j + 0.5) / side, (i + 0.5) / side
                mask[n, i * side + j] = abs(x - cx) < w / 2 and abs(y - cy) < h / 2
    dense = layer.forward_dense(content, query_pos, memory, pos, mask).data

    whole = build_multiscale_kv(pyramid, np.array([[0.5, 0.5, 1.0, 1.0]]), side, [0])
    sparse_whole = layer.forward_sparse(content[0:1], query_pos[0:1], whole).data
    dense_whole = layer.forward_dense(content[0:1], query_pos[0:1], memory, pos).data
    return float(max(np.abs(sparse - dense).max(), np.abs(sparse_whole - dense_whole).max()))


@check("sparse_dense_alignment")
def check_alignment() -> str:
    with T.no_grad():
        gap = aligned_attention_gap()
    expect(gap < 1e-6, f"sparse and masked dense attention differ by {gap:.2e}")
    return f"max gap {gap:.1e}"


@check("query_permutation")
def check_permutation() -> str:
    config = tiny_config()
    model = DetectionTransformer(config.model, seed=7)
    scene = gen_scene(config.data.scene, 1)
    perm = np.array([2, 0, 3, 1])
    with T.no_grad():
        base = model(scene.pyramid)
        for p in (model.query_content, model.query_pos, model.reference_logits):
            p.data = p.data[perm]
        permuted = model(scene.pyramid)
    for layer, (a, b) in enumerate(zip(base, permuted)):
        expect(np.allclose(a.class_probs.data[perm], b.class_probs.data, atol=1e-9),
               f"layer {layer}: class probs not permuted")
        expect(np.allclose(a.boxes.data[perm], b.boxes.data, atol=1e-9),
               f"layer {layer}: boxes not permuted")
        expect(np.allclose(b.class_probs.data.sum(axis=1), 1.0, atol=1e-9),
               f"layer {layer}: probability rows do not sum to one")
    return "outputs permute with the queries"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@check("average_precision")
def check_ap() -> str:
    expect(abs(compute_ap([(1.0, 0.5)]) - 51.0 / 101.0) < 1e-12, "single-point AP")
    expect(compute_ap([]) == 0.0, "empty AP")
    gt = Box((0.3, 0.3, 0.2, 0.2))
    labels = [LabelSet([(0, gt), (0, Box((0.7, 0.7, 0.2, 0.2)))], 4)]
    dets = [[Detection(gt, 0, 0.9), Detection(Box((0.5, 0.1, 0.1, 0.1)), 0, 0.8)]]
    points = compute_pr(dets, labels, 0.5, 0)
    expect(points == [(1.0, 0.5), (0.5, 0.5)], f"greedy PR points {points}")
    return "hand-derived PR and AP values"


def run_selftest(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run the named checks (all by default) and collect their outcomes."""
    selected = list(names) if names else list(CHECKS)
    results = []
    for name in selected:
        if name not in CHECKS:
            results.append(CheckResult(name, False, "no such check", 0.0))
            continue
        start = time.perf_counter()
        try:
            detail = CHECKS[name]()
            passed = True
        except (CheckFailed, DedetrError) as exc:
            detail, passed = str(exc), False
        elapsed = time.perf_counter() - start
        logger.info("selftest %s: %s (%.2fs)", name, "ok" if passed else "FAILED", elapsed)
        results.append(CheckResult(name, passed, detail, elapsed))
    return results
