"""Accuracy, AUC, the stage-by-task evaluation matrix and the AVG / PRE summaries.

After stage t the current model is evaluated on the test split of every stage j of
the protocol; R[t][j] holds the metric in percent. Two matrices are kept, one for
ACC and one for AUC.

Summary Metrics:
    - AVG: mean of the last row, i.e. the final model on every task
    - PRE: mean over t = 2..T of the mean of R[t][j] for j < t (stage-averaged
      performance on previously seen tasks)
    - PRE_final: mean of R[T][j] for j < T (final model only)

AUC is the Mann-Whitney rank statistic with half credit for ties, computed from
pandas average ranks.

Typical Usage:
    >>> from hdp_lab.evaluation import MatrixRecorder, build_report
    >>>
    >>> recorder = MatrixRecorder(stages)
    >>> run_protocol_hdp(stages, cfg, on_stage_end=recorder)
    >>> report = build_report(recorder, protocol='p1', cfg=cfg)
    >>> report.avg_acc, report.pre_acc
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple
import io

import numpy as np
import pandas as pd
import torch

from hdp_lab import logger
from hdp_lab.detector import Detector, forward_prob, features
from hdp_lab.errors import EmptyBatch, IncompleteMatrix, LengthMismatch, SingleClass
from hdp_lab.storage import store_or_raise, to_store
from hdp_lab.synthdata import Sample, StageDataset, stack_samples
from hdp_lab.uap import Perturbation, make_pseudo

_EVAL_BATCH = 256

MetricKind = Literal['ACC', 'AUC']


def accuracy(preds, labels) -> float:
    """Percentage of predictions equal to the labels.

    Raises:
        LengthMismatch: If the arrays differ in length.
        EmptyBatch: If they are empty.

    Examples:
        >>> accuracy([1, 0, 1, 1], [1, 1, 1, 0])
        50.0
    """
    p = np.asarray(preds).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(p) != len(y):
        raise LengthMismatch(f"preds has {len(p)} entries, labels has {len(y)}")
    if len(p) == 0:
        raise EmptyBatch("accuracy of an empty set")
    return 100.0 * float(np.count_nonzero(p == y)) / len(p)


def auc(scores, labels) -> float:
    """Area under the ROC curve in percent, via the rank-sum statistic.

    AUC = P(score_fake > score_real) + 0.5 * P(tie), with label 1 = fake.

    Raises:
        LengthMismatch: If the arrays differ in length.
        SingleClass: If only one class is present.

    Examples:
        >>> auc([0.4, 0.8, 0.6, 0.9], [0, 0, 1, 1])
        75.0
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise LengthMismatch(f"scores has {len(s)} entries, labels has {len(y)}")

    positives = y == 1
    n_pos = int(np.count_nonzero(positives))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"AUC needs both classes, got {n_pos} fake and {n_neg} real")

    ranks = pd.Series(s).rank(method='average').to_numpy()
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def score_stage(m: Detector, stage: StageDataset) -> Tuple[np.ndarray, np.ndarray]:
    """Probability of fake for every test sample of a stage, with the labels."""
    x, y = stage.arrays('test')
    if len(x) == 0:
        raise EmptyBatch(f"Stage {stage.stage_id} has no test samples")

    was_training = m.training
    m.eval()
    with torch.no_grad():
        scores = np.concatenate([forward_prob(m, x[i:i + _EVAL_BATCH]).cpu().numpy().astype(np.float64)
                                 for i in range(0, len(x), _EVAL_BATCH)])
    m.train(was_training)
    return scores, y


def evaluate_model(m: Detector, stage: StageDataset) -> Tuple[float, float]:
    """(ACC, AUC) of a detector on a stage's test split.

    Predictions follow predict(): fake where the probability is >= 0.5.
    """
    scores, y = score_stage(m, stage)
    preds = (scores >= 0.5).astype(np.int64)
    return accuracy(preds, y), auc(scores, y)


@dataclass
class EvalMatrix:
    """T x T matrix of percent metrics; NaN marks an absent entry.

    Indices of get() and set() are 1-based stage numbers (row = model after stage t,
    column = task j).
    """
    kind: MetricKind
    values: np.ndarray

    @classmethod
    def empty(cls, kind: MetricKind, n_stages: int) -> 'EvalMatrix':
        return cls(kind=kind, values=np.full((n_stages, n_stages), np.nan))

    @classmethod
    def from_rows(cls, kind: MetricKind, rows: Sequence[Sequence[Optional[float]]]) -> 'EvalMatrix':
        values = np.array([[np.nan if v is None else float(v) for v in row] for row in rows], dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise IncompleteMatrix(f"Evaluation matrix must be square, got shape {values.shape}")
        return cls(kind=kind, values=values)

    @property
    def n_stages(self) -> int:
        return self.values.shape[0]

    def set(self, t: int, j: int, value: float) -> None:
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{self.kind} value must be in [0, 100], got {value}")
        self.values[t - 1, j - 1] = value

    def get(self, t: int, j: int) -> Optional[float]:
        v = self.values[t - 1, j - 1]
        return None if np.isnan(v) else float(v)

    def replicate_row(self, t: int) -> None:
        """Copy row t into every row, for a model trained once on all stages."""
        self.values[:] = self.values[t - 1]

    def diagonal(self) -> List[Optional[float]]:
        return [self.get(t, t) for t in range(1, self.n_stages + 1)]

    def to_rows(self) -> List[List[Optional[float]]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]

    def to_frame(self) -> pd.DataFrame:
        labels = [f"stage_{t}" for t in range(1, self.n_stages + 1)]
        return pd.DataFrame(self.values, index=labels, columns=[f"task_{j}" for j in range(1, self.n_stages + 1)])


def avg_metric(R: EvalMatrix) -> float:
    """Mean of the last row.

    Raises:
        IncompleteMatrix: If the last row has absent entries.
    """
    last = R.values[-1]
    if np.isnan(last).any():
        raise IncompleteMatrix(f"Last row of the {R.kind} matrix is incomplete")
    return float(np.mean(last))


def pre_metric(R: EvalMatrix) -> float:
    """Stage-averaged mean performance on previously seen tasks.

    PRE = 1/(T-1) * sum over t = 2..T of mean_{j<t} R[t][j].

    Raises:
        IncompleteMatrix: If T < 2 or a needed entry is absent.
    """
    T = R.n_stages
    if T < 2:
        raise IncompleteMatrix("PRE needs at least 2 stages")
    stage_means = []
    for t in range(2, T + 1):
        previous = R.values[t - 1, :t - 1]
        if np.isnan(previous).any():
            raise IncompleteMatrix(f"{R.kind} matrix lacks previous-task entries of row {t}")
        stage_means.append(float(np.mean(previous)))
    return float(np.mean(stage_means))


def pre_final_metric(R: EvalMatrix) -> float:
    """Mean of the final model's metric on tasks 1..T-1."""
    T = R.n_stages
    if T < 2:
        raise IncompleteMatrix("PRE needs at least 2 stages")
    previous = R.values[T - 1, :T - 1]
    if np.isnan(previous).any():
        raise IncompleteMatrix(f"{R.kind} matrix lacks previous-task entries of the last row")
    return float(np.mean(previous))


class MatrixRecorder:
    """Stage hook that fills the ACC and AUC matrices.

    Pass an instance as `on_stage_end` to a run_protocol_* function. After stage t
    it evaluates the model on every stage's test split and writes row t.
    """

    def __init__(self, stages: Sequence[StageDataset]):
        self.stages = list(stages)
        self._row = {stage.stage_id: t for t, stage in enumerate(self.stages, start=1)}
        self.acc = EvalMatrix.empty('ACC', len(self.stages))
        self.auc = EvalMatrix.empty('AUC', len(self.stages))
        self.stage_seconds: Dict[int, float] = {}

    def __call__(self, m: Detector, stage: StageDataset, result=None) -> None:
        t = self._row[stage.stage_id]
        for j, task in enumerate(self.stages, start=1):
            acc_value, auc_value = evaluate_model(m, task)
            self.acc.set(t, j, acc_value)
            self.auc.set(t, j, auc_value)
        if result is not None:
            self.stage_seconds[stage.stage_id] = result.wall_seconds
        logger.info("Evaluated model after stage %s: ACC row %s", stage.stage_id,
                    [round(v, 2) for v in self.acc.values[t - 1]])

    def replicate_last_row(self) -> None:
        """Fill every row from the last one (a single model trained on all stages)."""
        self.acc.replicate_row(self.acc.n_stages)
        self.auc.replicate_row(self.auc.n_stages)

    @property
    def stage_local_acc(self) -> List[Optional[float]]:
        return self.acc.diagonal()


@dataclass
class MetricsReport:
    """Summary of one run, serialized as the run's report.json."""
    protocol: str
    method: str
    seed: int
    beta: float
    epochs: int
    matrix_acc: List[List[Optional[float]]]
    matrix_auc: List[List[Optional[float]]]
    avg_acc: float
    avg_auc: float
    pre_acc: float
    pre_auc: float
    pre_final_acc: float
    pre_final_auc: float
    final_acc: List[float] = field(default_factory=list)
    final_auc: List[float] = field(default_factory=list)
    stage_local_acc: List[Optional[float]] = field(default_factory=list)
    per_stage_seconds: List[float] = field(default_factory=list)
    sigma: Optional[float] = None
    components: str = 'EPR'
    buffer_per_stage: int = 0
    config_hash: str = ''
    seeds: Dict[str, int] = field(default_factory=dict)
    sigma_unreached_stages: List[int] = field(default_factory=list)
    version: str = ''
    timestamp: str = ''

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> 'MetricsReport':
        known = {f for f in cls.__dataclass_fields__}
        ignored = sorted(set(payload) - known)
        if ignored:
            logger.warning("Ignoring unknown report fields: %s", ignored)
        return cls(**{k: v for k, v in payload.items() if k in known})

    def recompute(self) -> Dict[str, float]:
        """AVG / PRE recomputed from the stored matrices."""
        acc = EvalMatrix.from_rows('ACC', self.matrix_acc)
        auc_matrix = EvalMatrix.from_rows('AUC', self.matrix_auc)
        return {
            'avg_acc': avg_metric(acc),
            'avg_auc': avg_metric(auc_matrix),
            'pre_acc': pre_metric(acc),
            'pre_auc': pre_metric(auc_matrix),
            'pre_final_acc': pre_final_metric(acc),
            'pre_final_auc': pre_final_metric(auc_matrix),
        }

    def is_consistent(self) -> bool:
        """True when the stored summaries equal the ones recomputed from the matrices."""
        recomputed = self.recompute()
        mismatched = {k: (getattr(self, k), v) for k, v in recomputed.items() if getattr(self, k) != v}
        if mismatched:
            logger.warning("Report summaries disagree with its matrices: %s", mismatched)
        return not mismatched


def build_report(recorder: MatrixRecorder,
                 *,
                 protocol: str,
                 cfg,
                 per_stage_seconds: Sequence[float] = (),
                 sigma_unreached_stages: Sequence[int] = (),
                 config_hash: str = '',
                 seeds: Optional[Dict[str, int]] = None,
                 version: str = '',
                 timestamp: str = '') -> MetricsReport:
    """Assemble a MetricsReport from filled matrices and the run configuration.

    Args:
        recorder: MatrixRecorder whose matrices are complete.
        protocol: Protocol name.
        cfg: TrainConfig of the run.
        per_stage_seconds: Wall time of each trained stage; empty unless the run
            opted into recording them.
        sigma_unreached_stages: Stages whose UAP ended below sigma.
        config_hash: Hash of the resolved configuration.
        seeds: Named seeds of the run.
        version: Package version.
        timestamp: ISO timestamp of the run.

    Raises:
        IncompleteMatrix: If the matrices lack entries needed by AVG or PRE.
    """
    acc, auc_matrix = recorder.acc, recorder.auc
    return MetricsReport(
        protocol=protocol,
        method=cfg.method.value,
        seed=cfg.seed,
        beta=cfg.beta,
        epochs=cfg.epochs_per_stage,
        matrix_acc=acc.to_rows(),
        matrix_auc=auc_matrix.to_rows(),
        avg_acc=avg_metric(acc),
        avg_auc=avg_metric(auc_matrix),
        pre_acc=pre_metric(acc),
        pre_auc=pre_metric(auc_matrix),
        pre_final_acc=pre_final_metric(acc),
        pre_final_auc=pre_final_metric(auc_matrix),
        final_acc=[float(v) for v in acc.values[-1]],
        final_auc=[float(v) for v in auc_matrix.values[-1]],
        stage_local_acc=recorder.stage_local_acc,
        per_stage_seconds=list(per_stage_seconds),
        sigma=cfg.uap.sigma,
        components=cfg.components,
        buffer_per_stage=cfg.buffer_per_stage,
        config_hash=config_hash,
        seeds=dict(seeds or {}),
        sigma_unreached_stages=list(sigma_unreached_stages),
        version=version,
        timestamp=timestamp,
    )


def feature_dump(m: Detector,
                 samples: Sequence[Sample],
                 path: str | Path,
                 pseudo: Optional[Perturbation] = None,
                 clamp: bool = False) -> Path:
    """Write extractor features of samples as CSV for external embedding tools.

    Columns: sample_id, stage_id, kind (real / fake / pseudo), f0 .. f{d-1}. When a
    perturbation is given, every real sample also gets a 'pseudo' row for x + delta.

    Args:
        m: Detector whose extractor is used.
        samples: Samples to embed.
        path: Output CSV path.
        pseudo: Optional perturbation for pseudo-forged rows.
        clamp: Clamp pseudo-forged images to [0, 1].

    Returns:
        Path of the written file.

    Raises:
        IOFailure: If the file cannot be written.
    """
    path = Path(path)
    x, y = stack_samples(list(samples))
    kinds = ['fake' if label == 1 else 'real' for label in y]
    stage_ids = [s.stage_id for s in samples]

    if pseudo is not None:
        real_idx = [i for i, label in enumerate(y) if label == 0]
        if real_idx:
            x = np.concatenate([x, make_pseudo(x[real_idx], pseudo, clamp).astype(np.float32)])
            kinds += ['pseudo'] * len(real_idx)
            stage_ids += [stage_ids[i] for i in real_idx]

    m.eval()
    with torch.no_grad():
        feats = (np.concatenate([features(m, x[i:i + _EVAL_BATCH]).cpu().numpy()
                                 for i in range(0, len(x), _EVAL_BATCH)])
                 if len(x) else np.zeros((0, m.feature_dim), dtype=np.float32))

    df = pd.DataFrame(feats.astype(np.float64), columns=[f"f{k}" for k in range(m.feature_dim)])
    df.insert(0, 'kind', kinds)
    df.insert(0, 'stage_id', stage_ids)
    df.insert(0, 'sample_id', np.arange(len(df)))

    buffer = io.StringIO()
    df.to_csv(buffer, index=False)
    return store_or_raise(to_store(file_name=path.name, content=buffer.getvalue().encode('utf-8'),
                                   base_path=path.parent))
