"""Top-1 / per-class accuracy, confusion matrices, and report files.

Evaluation applies no augmentation: images are resized, normalized, and
classified by argmax (ties to the lowest class index). The confusion matrix
is oriented rows = true class, columns = predicted class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model
from .errors import DataError
from .imaging import resize_normalize
from .manifest import DatasetManifest

_EVAL_BATCH = 64


@dataclass
class EvalReport:
    top1: float
    per_class: list[float | None]
    macro_avg: float
    micro_avg: float
    confusion: np.ndarray
    n: int


def evaluate(
    params: model.ModelParams,
    manifest: DatasetManifest,
    images: dict[str, np.ndarray],
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
    std: tuple[float, float, float] = (0.5, 0.5, 0.5),
) -> EvalReport:
    if len(manifest) == 0:
        raise DataError("empty evaluation split")
    c = manifest.class_count
    if c != params.class_count:
        raise DataError(
            f"manifest has {c} classes but checkpoint was trained with {params.class_count}"
        )
    confusion = np.zeros((c, c), dtype=np.int64)
    records = manifest.records
    for start in range(0, len(records), _EVAL_BATCH):
        chunk = records[start:start + _EVAL_BATCH]
        batch = []
        for rec in chunk:
            if rec.label is None:
                raise DataError(f"record {rec.id} has no label; cannot evaluate")
            if rec.id not in images:
                raise DataError(f"no image loaded for record {rec.id}")
            batch.append(
                resize_normalize(images[rec.id], params.input_side, mean, std).transpose(2, 0, 1)
            )
        logits, _ = model.forward(params, np.stack(batch))
        preds = np.argmax(logits, axis=1)
        for rec, pred in zip(chunk, preds):
            confusion[rec.label, pred] += 1

    n = int(confusion.sum())
    top1 = float(np.trace(confusion)) / n
    support = confusion.sum(axis=1)
    per_class: list[float | None] = [
        float(confusion[i, i]) / support[i] if support[i] > 0 else None for i in range(c)
    ]
    defined = [v for v in per_class if v is not None]
    macro = float(np.mean(defined)) if defined else 0.0
    return EvalReport(
        top1=top1,
        per_class=per_class,
        macro_avg=macro,
        micro_avg=float(np.trace(confusion)) / n,
        confusion=confusion,
        n=n,
    )


def write_report(report: EvalReport, class_names: list[str], out_dir: str | Path) -> None:
    """Emit eval.json, confusion.csv and confusion.svg under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "top1": report.top1,
        "macro_avg": report.macro_avg,
        "micro_avg": report.micro_avg,
        "per_class": {name: report.per_class[i] for i, name in enumerate(class_names)},
        "n": report.n,
    }
    with (out_dir / "eval.json").open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with (out_dir / "confusion.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(class_names) + "\n")
        for row in report.confusion:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    (out_dir / "confusion.svg").write_text(
        confusion_svg(report.confusion, class_names), encoding="utf-8"
    )


def read_confusion_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text("utf-8").splitlines()
    names = lines[0].split(",")
    rows = [[int(v) for v in line.split(",")] for line in lines[1:] if line]
    matrix = np.array(rows, dtype=np.int64)
    if matrix.shape != (len(names), len(names)):
        raise DataError(f"{path}: confusion matrix is not square over the class header")
    return names, matrix


def confusion_svg(confusion: np.ndarray, class_names: list[str]) -> str:
    """Cell-shaded grid, x axis = predicted class, y axis = true class.

    The only rect elements are the C*C cells, so the document structure
    mirrors the matrix exactly.
    """
    c = confusion.shape[0]
    cell = 44
    margin_left, margin_top = 110, 70
    width = margin_left + c * cell + 20
    height = margin_top + c * cell + 20
    peak = int(confusion.max()) or 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" style="background:#ffffff">',
        f'<text x="{margin_left + c * cell / 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">predicted</text>',
        f'<text x="16" y="{margin_top + c * cell / 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 16 {margin_top + c * cell / 2})">true</text>',
    ]
    for j, name in enumerate(class_names):
        x = margin_left + j * cell + cell / 2
        parts.append(
            f'<text x="{x}" y="{margin_top - 10}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    for i, name in enumerate(class_names):
        y = margin_top + i * cell + cell / 2 + 4
        parts.append(
            f'<text x="{margin_left - 8}" y="{y}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    for i in range(c):
        for j in range(c):
            frac = confusion[i, j] / peak
            r = int(round(255 + (30 - 255) * frac))
            g = int(round(255 + (80 - 255) * frac))
            b = int(round(255 + (160 - 255) * frac))
            x = margin_left + j * cell
            y = margin_top + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({r},{g},{b})" stroke="#888" stroke-width="1"/>'
            )
            text_fill = "#ffffff" if frac > 0.55 else "#111111"
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12" fill="{text_fill}">'
                f'{int(confusion[i, j])}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
