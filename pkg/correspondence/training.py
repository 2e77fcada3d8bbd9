"""
Mini-batch Adam training of the matcher on a generated dataset.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from .datagen import list_samples, load_sample, read_dataset_manifest
from .exceptions import DatasetEmpty, NonFiniteLoss, ShapeMismatch
from .inference import Estimator
from .metrics import aepe
from .model import ModelArchitecture, ModelWeights, loss_and_gradients

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = ['iteration', 'loss', 'aepe_val']


class Adam:
    """Adam over a dict of named tensors"""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad ** 2
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def learning_rate(base_lr: float, iteration: int, iterations: int, milestones) -> float:
    """Base rate halved at every milestone reached by the 1-based ``iteration``"""
    passed = sum(1 for m in milestones if iteration >= int(m * iterations))
    return base_lr * 0.5 ** passed


MASK_KINDS = ('injective', 'occlusion', 'none')


@dataclass
class TrainingData:
    """In-memory copy of a dataset split"""

    query: np.ndarray
    reference: np.ndarray
    flow: np.ndarray
    valid: np.ndarray
    inj: np.ndarray
    occ: np.ndarray

    def __len__(self):
        return self.query.shape[0]

    def tail(self, count: int) -> 'TrainingData':
        return TrainingData(self.query[-count:], self.reference[-count:], self.flow[-count:],
                            self.valid[-count:], self.inj[-count:], self.occ[-count:])

    def ignore_mask(self, index, kind: str = 'injective') -> np.ndarray:
        """Pixels left out of the loss: the injective mask, the occlusion mask or nothing"""
        if kind == 'injective':
            return self.inj[index]
        if kind == 'occlusion':
            return self.occ[index]
        if kind == 'none':
            return np.zeros_like(self.inj[index])
        raise ValueError(f"unknown training mask {kind!r}, expected one of {MASK_KINDS}")

    def batch(self, index, mask: str = 'injective') -> Dict:
        return {
            'query': self.query[index].astype(np.float64),
            'reference': self.reference[index].astype(np.float64),
            'flow': self.flow[index].astype(np.float64),
            'valid': self.valid[index],
            'ignore': self.ignore_mask(index, mask),
        }


def load_training_data(dataset_dir, paths: Optional[List[Path]] = None) -> TrainingData:
    paths = list_samples(dataset_dir) if paths is None else paths
    if not paths:
        raise DatasetEmpty(f"no samples in {dataset_dir}")
    packs = [load_sample(p) for p in paths]
    shapes = {p.shape for p in packs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"samples in {dataset_dir} have mixed sizes {sorted(shapes)}")
    return TrainingData(
        query=np.stack([p.query for p in packs]).astype(np.float32),
        reference=np.stack([p.reference for p in packs]).astype(np.float32),
        flow=np.stack([np.where(p.gt_flow.valid[..., None], p.gt_flow.vectors, 0.0)
                       for p in packs]).astype(np.float32),
        valid=np.stack([p.gt_flow.valid for p in packs]),
        inj=np.stack([p.inj_mask for p in packs]),
        occ=np.stack([p.occ_mask for p in packs]),
    )


@dataclass
class TrainingResult:
    weights: ModelWeights
    losses: List[float] = field(default_factory=list)
    final_aepe: float = float('nan')


def validation_aepe(weights: ModelWeights, data: TrainingData, batch_size: int = 16) -> float:
    """Mean over pairs of the full-resolution AEPE on valid ground truth"""
    if len(data) == 0:
        return float('nan')
    estimator = Estimator(weights)
    errors = []
    for start in range(0, len(data), batch_size):
        index = np.arange(start, min(start + batch_size, len(data)))
        batch = data.batch(index)
        for i, prediction in enumerate(estimator.predict_batch(batch['query'], batch['reference'])):
            if batch['valid'][i].any():
                errors.append(aepe(prediction.flow.vectors, batch['flow'][i], batch['valid'][i]))
    return float(np.mean(errors)) if errors else float('nan')


def train(dataset_dir, config, rng: np.random.Generator, output_dir=None,
          initial: Optional[ModelWeights] = None) -> TrainingResult:
    """Adam on the masked multiscale NLL; writes checkpoints and a loss log into ``output_dir``"""
    paths = list_samples(dataset_dir)
    manifest = read_dataset_manifest(dataset_dir)
    n_val = int(len(paths) * config.val_fraction)
    if len(paths) - n_val < 1:
        raise DatasetEmpty(f"{dataset_dir} leaves no training samples after the validation split")
    train_data = load_training_data(dataset_dir, paths[:len(paths) - n_val])
    val_data = load_training_data(dataset_dir, paths[len(paths) - n_val:]) if n_val else None
    if val_data is None:
        val_data = train_data.tail(config.batch_size)

    constraints = config.constraint_spec()
    if initial is None:
        architecture = ModelArchitecture.from_config(config, constraints.num_components)
        weights = ModelWeights.initialize(architecture, constraints, seed=config.seed)
    else:
        weights = initial.copy()
    weights.metadata.update({
        'config_hash': config.config_hash(),
        'dataset_config_hash': manifest.get('config_hash', ''),
        'seed': config.seed,
    })

    output_dir = Path(output_dir) if output_dir else None
    if output_dir:
        output_dir.mkdir(parents=True, exist_ok=True)
    log_rows = []

    optimizer = Adam(weights.params, lr=config.learning_rate)
    losses = []
    logger.info(
        f"Training on {len(train_data)} samples ({len(val_data)} for validation), "
        f"{config.iterations} iterations, batch {config.batch_size}, {config.training_mask} mask"
    )
    progress = tqdm(range(1, config.iterations + 1), desc='train', disable=None, leave=False)
    for iteration in progress:
        index = rng.choice(len(train_data), size=config.batch_size,
                           replace=len(train_data) < config.batch_size)
        batch = train_data.batch(np.sort(index), config.training_mask)
        loss, grads = loss_and_gradients(
            batch['query'], batch['reference'],
            np.where(batch['valid'][..., None], batch['flow'], np.nan), batch['ignore'],
            weights, config.loss_weights, config.weight_decay,
        )
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise NonFiniteLoss(f"non-finite loss or gradient at iteration {iteration} (loss={loss})")
        lr = learning_rate(config.learning_rate, iteration, config.iterations,
                           config.lr_milestones)
        optimizer.step(weights.params, grads, lr=lr)
        losses.append(loss)

        checkpoint_now = config.checkpoint_every and iteration % config.checkpoint_every == 0
        if iteration % config.log_every == 0 or checkpoint_now or iteration == config.iterations:
            val = None
            if checkpoint_now or iteration == config.iterations:
                val = validation_aepe(weights, val_data)
            log_rows.append([iteration, loss, val])
            logger.info(
                f"Iteration {iteration}: loss={loss:.4f} lr={lr:.2e}"
                + (f" aepe_val={val:.3f}" if val is not None else "")
            )
        if checkpoint_now and output_dir:
            weights.save(output_dir / f'checkpoint_{iteration:06d}.pdcw')

    final_aepe = validation_aepe(weights, val_data)
    if output_dir:
        weights.save(output_dir / 'weights.pdcw')
        write_loss_log(output_dir / 'loss.csv', log_rows)
    logger.info(f"Training finished: validation AEPE {final_aepe:.3f} px")
    return TrainingResult(weights=weights, losses=losses, final_aepe=final_aepe)


def write_loss_log(path, rows):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_HEADER)
        for iteration, loss, val in rows:
            writer.writerow([
                iteration,
                format(loss, ".10g"),
                "" if val is None else format(val, ".10g"),
            ])
