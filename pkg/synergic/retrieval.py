"""
Similar-nodule retrieval diagnosis.

Every historical nodule is summarised by the model's two scalar outputs: the
CNet probability (machine reasoning) and the RNet score (expert reasoning).
A new nodule is diagnosed by averaging the labels of its K nearest records.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from jinja2 import Environment
from matplotlib import pyplot as plt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from synergic.data_model import SCORE_MAX, SCORE_MIN, read_patch
from synergic.errors import LeakageError, ManifestIOError, RetrievalError
from synergic.evaluation import compute_metrics, iter_outputs

logger = logging.getLogger(__name__)

DEFAULT_K = 20
RELABEL_CUTOFF = 0.5


class RetrievalMode(str, Enum):
    MACHINE = 'machine'
    EXPERT = 'expert'
    CONCAT = 'concat'


class RetrievalRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    nodule_id: str
    cls_prob: float = Field(ge=0, le=1)
    reg_score: float
    label: int | None = Field(default=None, ge=0, le=1)
    patch_path: str | None = None

    def features(self, mode):
        mode = RetrievalMode(mode)
        if mode is RetrievalMode.MACHINE:
            return (self.cls_prob,)
        if mode is RetrievalMode.EXPERT:
            return (self.reg_score,)
        return (self.cls_prob, self.reg_score)


@dataclass(frozen=True)
class DiagnosisResult:
    diag: float
    neighbors: tuple  # ((nodule_id, distance), ...) ascending
    labels: tuple
    mode: RetrievalMode
    k: int


def build_database(model, samples, device='cpu', patch_paths=None):
    """One record per sample from an eval-mode forward pass; unsure samples get no label"""
    patch_paths = patch_paths or {}
    records = []
    for sample, outputs in iter_outputs(model, samples, device):
        records.append(RetrievalRecord(
            nodule_id=sample.nodule_id,
            cls_prob=float(outputs.cls_prob[0]),
            reg_score=float(outputs.reg_score[0]),
            label=getattr(sample, 'label', None),
            patch_path=patch_paths.get(sample.nodule_id),
        ))
    return records


def retrieve(query, db, k=DEFAULT_K, mode=RetrievalMode.CONCAT):
    """
    K nearest database records by Euclidean distance in the mode's feature
    space. Equal distances are ordered by nodule_id.
    """
    mode = RetrievalMode(mode)
    if k < 1:
        raise RetrievalError(f"k must be positive, got {k}")
    if len(db) < k:
        raise RetrievalError(f"database holds {len(db)} records, fewer than k={k}")
    if any(r.label is None for r in db):
        raise RetrievalError("database records must carry labels")

    q = np.asarray(query.features(mode) if isinstance(query, RetrievalRecord) else query, dtype=np.float64)
    feats = np.array([r.features(mode) for r in db], dtype=np.float64)
    if feats.shape[1] != q.size:
        raise RetrievalError(f"query has {q.size} features, {mode.value} mode uses {feats.shape[1]}")

    dists = np.sqrt(((feats - q) ** 2).sum(axis=1))
    ids = np.array([r.nodule_id for r in db])
    order = np.lexsort((ids, dists))[:k]
    labels = tuple(int(db[i].label) for i in order)
    return DiagnosisResult(
        diag=sum(labels) / k,
        neighbors=tuple((str(ids[i]), float(dists[i])) for i in order),
        labels=labels,
        mode=mode,
        k=k,
    )


def check_leakage(test_records, db):
    overlap = {r.nodule_id for r in test_records} & {r.nodule_id for r in db}
    if overlap:
        raise LeakageError(f"leakage: {len(overlap)} test nodules are in the database, e.g. {sorted(overlap)[0]}")


def evaluate_diagnosis(test_records, db, k=DEFAULT_K, mode=RetrievalMode.CONCAT, threshold=0.5):
    """Returns (MetricReport over diag scores, list of DiagnosisResult)"""
    check_leakage(test_records, db)
    results = [retrieve(r, db, k, mode) for r in test_records]
    report = compute_metrics([res.diag for res in results], [r.label for r in test_records], threshold)
    logger.info("[Retrieval] %s k=%d acc=%.4f", RetrievalMode(mode).value, k, report.accuracy)
    return report, results


def save_database(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(record.model_dump_json() + '\n')
    return path


def load_database(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise ManifestIOError(path, e.strerror or str(e)) from e
    records = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(RetrievalRecord.model_validate_json(line))
        except ValidationError as e:
            raise ManifestIOError(path, f"line {number}: {e.errors()[0]['msg']}") from e
    return records


# ─── Relabelling unsure data ─────────────────────────────────────────────────

def score_bucket(score):
    """Round half up to an integer rating in [1, 5]"""
    return int(min(max(np.floor(float(score) + 0.5), SCORE_MIN), SCORE_MAX))


def relabel_unsure(records, scores, db, k=DEFAULT_K, mode=RetrievalMode.CONCAT):
    """
    Diagnose unsure nodules by retrieval (diag >= 0.5 is malignant) and count
    the new labels per rounded original average score.

    ``scores`` maps nodule_id to the raters' average malignancy score.
    """
    check_leakage(records, db)
    buckets = {str(b): {'benign': 0, 'malignant': 0} for b in range(SCORE_MIN, SCORE_MAX + 1)}
    assignments = []
    for record in records:
        result = retrieve(record, db, k, mode)
        label = int(result.diag >= RELABEL_CUTOFF)
        bucket = score_bucket(scores[record.nodule_id])
        buckets[str(bucket)]['malignant' if label else 'benign'] += 1
        assignments.append({
            'nodule_id': record.nodule_id,
            'score': float(scores[record.nodule_id]),
            'bucket': bucket,
            'diag': result.diag,
            'label': label,
        })
    return {'k': k, 'mode': RetrievalMode(mode).value, 'buckets': buckets, 'assignments': assignments}


def plot_relabel(summary, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(summary['buckets'])
    benign = [summary['buckets'][b]['benign'] for b in names]
    malignant = [summary['buckets'][b]['malignant'] for b in names]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, benign, label='benign', color='tab:blue')
    ax.bar(names, malignant, bottom=benign, label='malignant', color='tab:red')
    ax.set_xlabel('average malignancy score')
    ax.set_ylabel('nodules')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def write_relabel(summary, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'relabel.json').write_text(json.dumps(summary, indent=2), encoding='utf-8')
    return plot_relabel(summary, out_dir / 'relabel.png')


# ─── HTML report ─────────────────────────────────────────────────────────────

REPORT_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>Retrieval diagnosis {{ query_id }}</title>
<style>
body { font-family: sans-serif; margin: 2em; }
.grid { display: flex; flex-wrap: wrap; gap: 1em; }
.case { border: 1px solid #ccc; padding: .5em; text-align: center; font-size: .85em; }
.malignant { border-color: #c0392b; }
.benign { border-color: #2980b9; }
img { width: 128px; height: 128px; image-rendering: pixelated; }
</style>
</head>
<body>
<h1>Nodule {{ query_id }}</h1>
<p>Diagnosis score <strong>{{ '%.3f' % result.diag }}</strong>
   ({{ result.mode.value }} mode, K = {{ result.k }})</p>
{% if query_image %}<p><img src="{{ query_image }}" alt="query"></p>{% endif %}
<div class="grid">
{% for case in cases %}
  <div class="case {{ 'malignant' if case.label else 'benign' }}">
    {% if case.image %}<img src="{{ case.image }}" alt="{{ case.nodule_id }}"><br>{% endif %}
    #{{ loop.index }} {{ case.nodule_id }}<br>
    d = {{ '%.4f' % case.distance }} &middot; {{ 'malignant' if case.label else 'benign' }}
  </div>
{% endfor %}
</div>
</body>
</html>
"""

_env = Environment(autoescape=True)


def _central_slice_png(patch_path, out_path):
    patch = read_patch(patch_path)
    plt.imsave(out_path, patch.lung_window[patch.spatial_shape[0] // 2], cmap='gray', vmin=0.0, vmax=1.0)
    return out_path


def render_report(query_id, result, db, out_path, query_patch_path=None, root=None):
    """Static HTML gallery of the K neighbours with their central slices"""
    out_path = Path(out_path)
    assets = out_path.parent / f"{out_path.stem}_files"
    assets.mkdir(parents=True, exist_ok=True)
    root = Path(root) if root else Path('.')
    by_id = {r.nodule_id: r for r in db}

    def image_for(nodule_id, patch_path):
        if not patch_path:
            return None
        path = Path(patch_path)
        path = path if path.is_absolute() else root / path
        try:
            png = _central_slice_png(path, assets / f"{nodule_id}.png")
        except (OSError, ManifestIOError) as e:
            logger.warning("[Retrieval] no slice for %s: %s", nodule_id, e)
            return None
        return f"{assets.name}/{png.name}"

    cases = []
    for nodule_id, distance in result.neighbors:
        record = by_id[nodule_id]
        cases.append({
            'nodule_id': nodule_id,
            'distance': distance,
            'label': record.label,
            'image': image_for(nodule_id, record.patch_path),
        })

    html = _env.from_string(REPORT_TEMPLATE).render(
        query_id=query_id,
        result=result,
        cases=cases,
        query_image=image_for(f"query_{query_id}", query_patch_path),
    )
    out_path.write_text(html, encoding='utf-8')
    logger.info("[Retrieval] report written to %s", out_path)
    return out_path
