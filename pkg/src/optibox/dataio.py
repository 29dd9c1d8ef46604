"""Dataset records and their on-disk formats.

One sample = one image worth of grounding work: proposal boxes with their
feature vectors, queries each tied to a single ground-truth box, and an
optional global feature map. Datasets are stored as JSON-lines (one record
per line) so they diff and stream well; the bulky [C, S, S] feature maps
live in a sidecar binary keyed by image id.

JSONL record schema, key by key:

    image_id   str, unique within a dataset
    width      float > 0, image extent in x
    height     float > 0, image extent in y
    labeled    bool, whether this image's queries carry usable box labels
    proposals  list of [cx, cy, w, h] (center form)
    features   list of N rows of D_x floats, aligned with proposals
    queries    list of {"id": str, "ids": [int...], "phrase": str,
               "gt": [cx, cy, w, h]}
    gmap       optional, [C][S][S] nested lists (inline feature map)
    gmap_ref   optional, str key into the sidecar file

Sidecar binary layout (little-endian): magic b"OBGM", uint32 version (1),
uint32 C, uint32 S, uint32 count, then per entry a uint16 id length, the
utf-8 id, and C*S*S float64 values in C row-major order.
"""

import json
import re
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, MissingAssetError, OutOfBoundsError
from .geometry import Box, clip_box, image_bounds, union_box
from .textenc import Vocabulary

GMAP_MAGIC = b"OBGM"
GMAP_VERSION = 1


@dataclass
class Query:
    query_id: str
    ids: list  # token id sequence
    gt: Box
    phrase: str = ""


@dataclass
class SampleRecord:
    image_id: str
    width: float
    height: float
    proposals: list  # list[Box]
    features: np.ndarray  # [N, D_x]
    queries: list  # list[Query]
    labeled: bool = True
    gmap: np.ndarray = None  # [C, S, S] when materialised
    gmap_ref: str = field(default=None)

    @property
    def n_proposals(self):
        return len(self.proposals)


def validate_record(rec):
    """Enforce the structural invariants of one record."""
    feats = np.asarray(rec.features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(rec.proposals):
        raise DataFormatError(
            f"record {rec.image_id!r}: features {feats.shape} do not align "
            f"with {len(rec.proposals)} proposals"
        )
    if rec.width <= 0 or rec.height <= 0:
        raise DataFormatError(f"record {rec.image_id!r}: non-positive image extent")
    bx1, by1, bx2, by2 = image_bounds(rec.width, rec.height).corners()
    eps = 1e-9
    for q in rec.queries:
        x1, y1, x2, y2 = q.gt.corners()
        if x1 < bx1 - eps or y1 < by1 - eps or x2 > bx2 + eps or y2 > by2 + eps:
            raise OutOfBoundsError(
                f"record {rec.image_id!r}: gt box for query {q.query_id!r} "
                "exceeds the image bounds"
            )
    return rec


def _box_list(b):
    return [b.cx, b.cy, b.w, b.h]


def write_dataset(records, path, sidecar_path=None):
    """Write records as JSON-lines; feature maps go to the sidecar if given,
    inline otherwise."""
    maps = {}
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            validate_record(rec)
            obj = {
                "image_id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "labeled": bool(rec.labeled),
                "proposals": [_box_list(b) for b in rec.proposals],
                "features": np.asarray(rec.features, dtype=np.float64).tolist(),
                "queries": [
                    {
                        "id": q.query_id,
                        "ids": [int(i) for i in q.ids],
                        "phrase": q.phrase,
                        "gt": _box_list(q.gt),
                    }
                    for q in rec.queries
                ],
            }
            if rec.gmap is not None:
                if sidecar_path is not None:
                    maps[rec.image_id] = np.asarray(rec.gmap, dtype=np.float64)
                    obj["gmap_ref"] = rec.image_id
                else:
                    obj["gmap"] = np.asarray(rec.gmap, dtype=np.float64).tolist()
            elif rec.gmap_ref is not None:
                obj["gmap_ref"] = rec.gmap_ref
            f.write(json.dumps(obj) + "\n")
    if sidecar_path is not None and maps:
        write_feature_maps(sidecar_path, maps)


def load_dataset(path, sidecar_path=None):
    """Parse a JSON-lines dataset; malformed lines fail with their number.

    Records carrying a ``gmap_ref`` get their map materialised from the
    sidecar; a dangling reference raises MissingAssetError.
    """
    maps = None
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                n_props = len(obj["proposals"])
                feats = np.asarray(obj["features"], dtype=np.float64)
                feats = feats.reshape(n_props, -1) if n_props else np.zeros((0, 0))
                rec = SampleRecord(
                    image_id=obj["image_id"],
                    width=float(obj["width"]),
                    height=float(obj["height"]),
                    labeled=bool(obj["labeled"]),
                    proposals=[Box(*p) for p in obj["proposals"]],
                    features=feats,
                    queries=[
                        Query(
                            query_id=q["id"],
                            ids=[int(i) for i in q["ids"]],
                            gt=Box(*q["gt"]),
                            phrase=q.get("phrase", ""),
                        )
                        for q in obj["queries"]
                    ],
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DataFormatError(str(exc), line=lineno) from None
            if "gmap" in obj:
                rec.gmap = np.asarray(obj["gmap"], dtype=np.float64)
            elif obj.get("gmap_ref") is not None:
                rec.gmap_ref = obj["gmap_ref"]
                if maps is None:
                    if sidecar_path is None or not Path(sidecar_path).exists():
                        raise MissingAssetError(
                            f"record {rec.image_id!r} references a feature map "
                            "but no sidecar file was provided"
                        )
                    maps = load_feature_maps(sidecar_path)
                if rec.gmap_ref not in maps:
                    raise MissingAssetError(
                        f"feature map {rec.gmap_ref!r} missing from sidecar"
                    )
                rec.gmap = maps[rec.gmap_ref]
            validate_record(rec)
            records.append(rec)
    return records


def write_feature_maps(path, maps):
    """Write image-id -> [C, S, S] float64 maps in the sidecar layout."""
    if not maps:
        raise ValueError("no feature maps to write")
    shapes = {np.asarray(m).shape for m in maps.values()}
    if len(shapes) != 1:
        raise ValueError(f"feature maps disagree on shape: {sorted(shapes)}")
    (C, S, S2) = shapes.pop()
    if S != S2:
        raise ValueError("feature maps must be square on the spatial axes")
    with open(path, "wb") as f:
        f.write(GMAP_MAGIC)
        f.write(struct.pack("<IIII", GMAP_VERSION, C, S, len(maps)))
        for image_id, m in maps.items():
            encoded = image_id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(
                np.ascontiguousarray(m, dtype=np.float64)
                .astype("<f8", copy=False)
                .tobytes(order="C")
            )


def load_feature_maps(path):
    def read_exact(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise DataFormatError(f"feature-map sidecar truncated at {what}")
        return buf

    maps = {}
    with open(path, "rb") as f:
        if read_exact(f, 4, "magic") != GMAP_MAGIC:
            raise DataFormatError("not a feature-map sidecar (bad magic)")
        version, C, S, count = struct.unpack("<IIII", read_exact(f, 16, "header"))
        if version != GMAP_VERSION:
            raise DataFormatError(f"unsupported sidecar version {version}")
        per = C * S * S * 8
        for _ in range(count):
            (id_len,) = struct.unpack("<H", read_exact(f, 2, "id length"))
            image_id = read_exact(f, id_len, "image id").decode("utf-8")
            raw = read_exact(f, per, f"map for {image_id!r}")
            maps[image_id] = (
                np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(C, S, S)
            )
        if f.read(1):
            raise DataFormatError("trailing bytes after last sidecar entry")
    return maps


# ---------------------------------------------------------------------------
# external annotation layout (Sentences/*.txt + Annotations/*.xml)

_CHUNK_RE = re.compile(r"\[/EN#(\d+)(?:/[^\s\]]+)*\s+([^\]]+)\]")


def _parse_sentence_chunks(text):
    """Extract (entity id, phrase) pairs from one bracket-annotated sentence."""
    return [(m.group(1), m.group(2).strip()) for m in _CHUNK_RE.finditer(text)]


def _parse_annotation_xml(path):
    """Read image size and entity-id -> list of corner boxes from one file."""
    root = ET.parse(path).getroot()
    size = root.find("size")
    width = float(size.find("width").text)
    height = float(size.find("height").text)
    boxes = {}
    for obj in root.iter("object"):
        bnd = obj.find("bndbox")
        if bnd is None:
            continue
        corners = tuple(
            float(bnd.find(k).text) for k in ("xmin", "ymin", "xmax", "ymax")
        )
        for name in obj.iter("name"):
            boxes.setdefault(name.text.strip(), []).append(corners)
    return width, height, boxes


def import_entities_format(root_dir):
    """Build records from a Sentences/ + Annotations/ directory pair.

    Phrases annotated with several boxes are merged to their union box;
    phrases with no box at all are skipped. Proposals and features are not
    part of this layout and stay empty. Returns (records, vocabulary,
    skipped phrase count).
    """
    root = Path(root_dir)
    sent_dir = root / "Sentences"
    ann_dir = root / "Annotations"
    phrases_by_image = {}
    for sent_file in sorted(sent_dir.glob("*.txt")) if sent_dir.is_dir() else []:
        image_id = sent_file.stem
        chunks = []
        with open(sent_file, encoding="utf-8") as f:
            for line in f:
                chunks.extend(_parse_sentence_chunks(line))
        phrases_by_image[image_id] = chunks

    vocab = Vocabulary.from_corpus(
        phrase for chunks in phrases_by_image.values() for _, phrase in chunks
    )

    records = []
    skipped = 0
    for image_id, chunks in sorted(phrases_by_image.items()):
        xml_path = ann_dir / f"{image_id}.xml"
        if not xml_path.exists():
            skipped += len(chunks)
            continue
        width, height, boxes = _parse_annotation_xml(xml_path)
        bounds = image_bounds(width, height)
        queries = []
        for k, (entity_id, phrase) in enumerate(chunks):
            corner_sets = boxes.get(entity_id)
            if not corner_sets:
                skipped += 1
                continue
            gt = union_box([Box.from_corners(*c) for c in corner_sets])
            gt = clip_box(gt, bounds)
            queries.append(
                Query(
                    query_id=f"{image_id}#{k}",
                    ids=vocab.encode(phrase),
                    gt=gt,
                    phrase=phrase,
                )
            )
        if queries:
            records.append(
                SampleRecord(
                    image_id=image_id,
                    width=width,
                    height=height,
                    proposals=[],
                    features=np.zeros((0, 0)),
                    queries=queries,
                )
            )
    return records, vocab, skipped
