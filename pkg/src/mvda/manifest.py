"""Dataset manifests: ingestion, multi-view grouping, and leakage-safe splits.

A manifest is a JSON-lines file. The first line is a header naming the
classes, e.g. ``{"classes": ["-N", "-P", "-K", "-B", "-S", "ctrl"]}``; every
following line is one image record:

    {"id": "...", "path": "...", "domain": "source|target", "genotype": "...",
     "container": "...", "date": "YYYY-MM-DD", "view": 0, "label": 2}

``label`` may be ``null`` for target-domain records. Records are kept sorted
by id so that manifests serialize reproducibly.

Splitting is done by container, never by random record sampling: all views of
one container land on the same side of the split, which prevents leakage of
near-identical photos between train and test.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ManifestError

SOURCE = "source"
TARGET = "target"
_DOMAINS = (SOURCE, TARGET)


@dataclass(frozen=True)
class ImageRecord:
    """One photo of one container on one date, from one view."""

    id: str
    path: str
    domain: str
    genotype: str
    container_id: str
    capture_date: datetime.date
    view_id: int
    label: int | None = None

    def group_key(self) -> tuple[str, str, datetime.date]:
        """Key identifying the multi-view group this record belongs to."""
        return (self.domain, self.container_id, self.capture_date)

    def view_key(self) -> tuple[str, datetime.date, int]:
        return (self.container_id, self.capture_date, self.view_id)


@dataclass
class DatasetManifest:
    """An ordered, validated collection of image records.

    Construction sorts records by id and enforces the manifest invariants:
    unique (container, date, view) triples, labeled source records, and
    label indices below ``class_count``.
    """

    records: list[ImageRecord]
    class_count: int
    class_names: list[str]
    _groups: dict[tuple, list[ImageRecord]] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        if self.class_count != len(self.class_names):
            raise ManifestError(
                f"class_count {self.class_count} != {len(self.class_names)} class names"
            )
        self.records = sorted(self.records, key=lambda r: r.id)
        seen_views: set[tuple] = set()
        seen_ids: set[str] = set()
        for rec in self.records:
            if rec.domain not in _DOMAINS:
                raise ManifestError(f"record {rec.id}: unknown domain {rec.domain!r}")
            if rec.id in seen_ids:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen_ids.add(rec.id)
            vk = rec.view_key()
            if vk in seen_views:
                raise ManifestError(
                    f"duplicate view key (container={vk[0]}, date={vk[1]}, view={vk[2]})"
                )
            seen_views.add(vk)
            if rec.domain == SOURCE and rec.label is None:
                raise ManifestError(f"unlabeled source record {rec.id!r}")
            if rec.label is not None and not 0 <= rec.label < self.class_count:
                raise ManifestError(
                    f"record {rec.id}: label {rec.label} out of range 0..{self.class_count - 1}"
                )
        self._groups = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def groups(self) -> dict[tuple, list[ImageRecord]]:
        """Records grouped by (domain, container, date), each sorted by view_id."""
        if self._groups is None:
            groups: dict[tuple, list[ImageRecord]] = {}
            for rec in self.records:
                groups.setdefault(rec.group_key(), []).append(rec)
            for members in groups.values():
                members.sort(key=lambda r: r.view_id)
            self._groups = groups
        return self._groups

    def container_ids(self) -> set[str]:
        return {r.container_id for r in self.records}

    def by_domain(self, domain: str) -> "DatasetManifest":
        """Sub-manifest containing only the given domain's records."""
        subset = [r for r in self.records if r.domain == domain]
        return DatasetManifest(subset, self.class_count, list(self.class_names))


@dataclass(frozen=True)
class SplitSpec:
    """Containers held out for testing; everything else trains."""

    heldout_containers: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "heldout_containers", frozenset(self.heldout_containers))
        if not self.heldout_containers:
            raise ManifestError("empty heldout container set")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest, validating structure line by line."""
    path = Path(path)
    records: list[ImageRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: malformed header: {exc}") from exc
    if not isinstance(header, dict) or "classes" not in header:
        raise ManifestError(f"{path}:1: header must be an object with a 'classes' list")
    class_names = list(header["classes"])
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
        try:
            records.append(
                ImageRecord(
                    id=obj["id"],
                    path=obj["path"],
                    domain=obj["domain"],
                    genotype=obj.get("genotype", ""),
                    container_id=obj["container"],
                    capture_date=datetime.date.fromisoformat(obj["date"]),
                    view_id=int(obj["view"]),
                    label=obj.get("label"),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad record field: {exc}") from exc
    return DatasetManifest(records, len(class_names), class_names)


def manifest_lines(manifest: DatasetManifest) -> list[str]:
    """The canonical serialized form, one JSON document per line."""
    lines = [json.dumps({"classes": manifest.class_names})]
    for rec in manifest.records:
        lines.append(
            json.dumps(
                {
                    "id": rec.id,
                    "path": rec.path,
                    "domain": rec.domain,
                    "genotype": rec.genotype,
                    "container": rec.container_id,
                    "date": rec.capture_date.isoformat(),
                    "view": rec.view_id,
                    "label": rec.label,
                }
            )
        )
    return lines


def manifest_sha256(manifest: DatasetManifest) -> str:
    """Content hash of the canonical serialization; echoed into run reports."""
    blob = ("\n".join(manifest_lines(manifest)) + "\n").encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the JSON-lines form; load_manifest(save_manifest(m)) == m."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for line in manifest_lines(manifest):
            fh.write(line + "\n")


def split_by_container(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split into (train, test) with the heldout containers forming the test set."""
    known = manifest.container_ids()
    unknown = spec.heldout_containers - known
    if unknown:
        raise ManifestError(f"unknown container ids in split spec: {sorted(unknown)}")
    test = [r for r in manifest.records if r.container_id in spec.heldout_containers]
    train = [r for r in manifest.records if r.container_id not in spec.heldout_containers]
    make = lambda recs: DatasetManifest(recs, manifest.class_count, list(manifest.class_names))
    return make(train), make(test)


def auto_holdout(manifest: DatasetManifest) -> SplitSpec:
    """Hold out the first container (by sorted id) of every (domain, class) pair."""
    chosen: dict[tuple, str] = {}
    for rec in manifest.records:
        key = (rec.domain, rec.label)
        cid = rec.container_id
        if key not in chosen or cid < chosen[key]:
            chosen[key] = cid
    return SplitSpec(frozenset(chosen.values()))


def view_candidates(query: ImageRecord, manifest: DatasetManifest) -> list[ImageRecord]:
    """All other views of the query's container taken on the same date.

    Candidates share domain, container and capture date with the query and
    differ in view_id; they are returned sorted by view_id. An empty list is
    a legitimate result for a container photographed once on that date.
    """
    members = manifest.groups().get(query.group_key(), [])
    return [r for r in members if r.view_id != query.view_id]


def strip_labels(manifest: DatasetManifest) -> DatasetManifest:
    """Label-free view of a target split, for handing to training code.

    Raises if any source record is present: stripping source labels would
    silently break supervised training.
    """
    if any(r.domain == SOURCE for r in manifest.records):
        raise ManifestError("refusing to strip labels from source-domain records")
    stripped = [replace(r, label=None) for r in manifest.records]
    return DatasetManifest(stripped, manifest.class_count, list(manifest.class_names))
