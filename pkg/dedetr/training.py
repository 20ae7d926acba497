"""
dedetr - Training loop.

Adam with decoupled weight decay and global gradient-norm clipping, a step
learning-rate drop, and per-epoch deep-supervision training followed by
evaluation on held-out scenes.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import NumericError
from .evaluation import evaluate
from .models import EvalResult
from .supervision import augment_labels, set_loss, summarize_losses
from .transformer import DetectionTransformer

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("config_id", "seed", "epoch", "loss_total", "loss_cls", "loss_l1",
                  "loss_giou", "ap", "ap50", "ap75")


class Adam:
    """
    Adam optimizer with decoupled weight decay.

    Args:
        parameters: Leaf tensors to update in place
        lr: Step size
        weight_decay: Decoupled decay rate (0 disables)
        clip_max_norm: Global gradient-norm cap applied in step() (None disables)
    """

    def __init__(self, parameters: Sequence, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 clip_max_norm: Optional[float] = None):
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_max_norm = clip_max_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.parameters]
        self.v = [np.zeros_like(p.data) for p in self.parameters]

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = sum(float((p.grad * p.grad).sum()) for p in self.parameters if p.grad is not None)
        return math.sqrt(total)

    def clip_gradients(self) -> float:
        """Rescale all gradients so their global L2 norm is at most clip_max_norm."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericError("gradient norm is not finite")
        if self.clip_max_norm is not None and norm > self.clip_max_norm:
            factor = self.clip_max_norm / (norm + 1e-6)
            for p in self.parameters:
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def step(self) -> None:
        self.clip_gradients()
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.parameters):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericError("parameter update produced non-finite values")


@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_l1: float
    loss_giou: float
    ap: float
    ap50: float
    ap75: float
    lr: float

    def as_row(self, config_id: str, seed: int) -> dict:
        values = asdict(self)
        values.update(config_id=config_id, seed=seed)
        return {column: values[column] for column in METRIC_COLUMNS}


def _scene_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class Trainer:
    """
    Trains one model instance; not shared across threads.

    Args:
        config: Run configuration
        seed: Overrides config.seed (parameter init, shuffling, augmentation)
    """

    def __init__(self, config: RunConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.model = DetectionTransformer(config.model, self.seed)
        opt = config.optimizer
        self.optimizer = Adam(self.model.parameters(), lr=opt.lr,
                              weight_decay=opt.weight_decay, clip_max_norm=opt.clip_max_norm)
        self.history: List[EpochMetrics] = []
        self.best_ap50 = -1.0
        self.best_state: Optional[dict] = None
        self.last_result: Optional[EvalResult] = None

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based epoch; dropped once past lr_drop_epoch."""
        opt = self.config.optimizer
        return opt.lr * opt.lr_drop_factor if epoch > opt.lr_drop_epoch else opt.lr

    def scene_loss(self, scene, epoch: int = 0) -> tuple:
        """Forward one scene and return (loss Tensor, per-layer breakdown)."""
        cfg = self.config
        labels = augment_labels(scene.labels_for(cfg.model.num_queries), cfg.augment,
                                cfg.model.label_aug, _scene_seed(self.seed, epoch, scene.index))
        outputs = self.model(scene.pyramid)
        return set_loss(outputs, labels, cfg.loss)

    def train_epoch(self, scenes: Sequence, epoch: int) -> dict:
        """
        One pass over shuffled scenes in mini-batches.

        Gradients of each scene are scaled by 1/B and accumulated before one
        optimizer step per batch.

        Returns:
            Mean layer-summed loss terms per scene
        """
        self.optimizer.lr = self.lr_at(epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(scenes))
        batch_size = self.config.optimizer.batch_size
        totals = {"loss_total": 0.0, "loss_cls": 0.0, "loss_l1": 0.0, "loss_giou": 0.0}
        for start in range(0, len(order), batch_size):
            batch = [scenes[i] for i in order[start:start + batch_size]]
            self.optimizer.zero_grad()
            for scene in batch:
                loss, breakdown = self.scene_loss(scene, epoch)
                if not math.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss on scene {scene.index}")
                T.backward(T.scale(loss, 1.0 / len(batch)))
                for key, value in summarize_losses(breakdown).items():
                    totals[key] += value
            self.optimizer.step()
            logger.debug("epoch %d batch %d: loss %.4f", epoch, start // batch_size,
                         totals["loss_total"] / (start + len(batch)))
        return {key: value / len(scenes) for key, value in totals.items()}

    def fit(self, train_scenes: Sequence, eval_scenes: Sequence,
            on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> List[EpochMetrics]:
        """
        Train for the configured number of epochs, evaluating after each.

        The parameters with the best eval AP50 so far are kept in best_state.
        """
        cfg = self.config
        for epoch in range(1, cfg.optimizer.epochs + 1):
            losses = self.train_epoch(train_scenes, epoch)
            result = evaluate(self.model, eval_scenes, cfg.model.num_classes,
                              cfg.model.label_aug, cfg.nms_threshold)
            metrics = EpochMetrics(epoch=epoch, ap=result.ap, ap50=result.ap50,
                                   ap75=result.ap75, lr=self.optimizer.lr, **losses)
            self.history.append(metrics)
            self.last_result = result
            if result.ap50 > self.best_ap50:
                self.best_ap50 = result.ap50
                self.best_state = self.model.state_dict()
            logger.info("epoch %d/%d: loss %.4f ap50 %.4f lr %.1e", epoch, cfg.optimizer.epochs,
                        metrics.loss_total, metrics.ap50, metrics.lr)
            if on_epoch is not None:
                on_epoch(metrics)
        return self.history
