"""File formats: JSON-lines traces, JSON parameter files, CSV run reports.

A trace file starts with a header object ``{"n", "m", "layout", "seed"?}``
followed by one record per frame::

    {"frame": 1, "gt_bbox": [x, y, w, h],
     "channels": [{"bbox": [...], "observables": [...], "correct": true}, ...],
     "detection": {"bbox": [...], "tp": false}, "shared": [...]}

``gt_bbox``, ``correct``, ``detection``, ``tp`` and ``shared`` are optional.
Writing always uses the same key order and compact separators, and floats
are written with their shortest round-trip representation, so reading a
file this module wrote and writing it again reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .emissions import ObservableLayout, ObservableModel
from .fusion import BBox, DetectionEvent, FusionOutput, TrackerReport
from .hmm import HmmParams
from .simulator import TraceRecord

PathLike = Union[str, Path]


class TraceFormatError(ValueError):
    """A trace line failed to parse or validate; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ParamsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceHeader:
    layout: ObservableLayout
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def m(self) -> int:
        return self.layout.m

    def to_dict(self) -> dict:
        d = {"n": self.n, "m": self.m, "layout": self.layout.to_dict()}
        if self.seed is not None:
            d["seed"] = self.seed
        return d


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _finite_list(value, length: Optional[int], what: str) -> list[float]:
    if not isinstance(value, list) or (length is not None and len(value) != length):
        want = f"{length} numbers" if length is not None else "a list of numbers"
        raise ValueError(f"{what} must be {want}")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ValueError(f"{what} holds a non-finite or non-numeric entry {v!r}")
        out.append(float(v))
    return out


def _bbox(value, what: str) -> BBox:
    x, y, w, h = _finite_list(value, 4, what)
    if w < 0 or h < 0:
        raise ValueError(f"{what} has negative size")
    return BBox(x, y, w, h)


def _observables(value, length: int, what: str) -> tuple[float, ...]:
    vals = _finite_list(value, length, what)
    if any(v < 0.0 or v > 1.0 for v in vals):
        raise ValueError(f"{what} must lie in [0, 1]")
    return tuple(vals)


def _check_keys(obj: dict, allowed: set, required: set, what: str):
    if not isinstance(obj, dict):
        raise ValueError(f"{what} must be a JSON object")
    missing = required - obj.keys()
    if missing:
        raise ValueError(f"{what} lacks {sorted(missing)}")
    extra = obj.keys() - allowed
    if extra:
        raise ValueError(f"{what} has unknown keys {sorted(extra)}")


def header_from_dict(d: dict) -> TraceHeader:
    _check_keys(d, {"n", "m", "layout", "seed"}, {"n", "m", "layout"}, "header")
    lay = d["layout"]
    _check_keys(lay, {"tracker_dims", "shared"}, {"tracker_dims"}, "layout")
    dims = lay["tracker_dims"]
    if not isinstance(dims, list) or not dims or any(type(k) is not int or k < 0 for k in dims):
        raise ValueError("layout tracker_dims must be a non-empty list of non-negative integers")
    shared = lay.get("shared", 0)
    if type(shared) is not int or shared < 0:
        raise ValueError("layout shared must be a non-negative integer")
    layout = ObservableLayout(tuple(dims), shared)
    if d["n"] != layout.n or d["m"] != layout.m:
        raise ValueError(f"header n={d['n']}, m={d['m']} disagrees with its layout ({layout.n}, {layout.m})")
    seed = d.get("seed")
    if seed is not None and type(seed) is not int:
        raise ValueError("seed must be an integer")
    return TraceHeader(layout, seed)


def record_to_dict(rec: TraceRecord) -> dict:
    d: dict = {"frame": rec.frame}
    if rec.gt_bbox is not None:
        d["gt_bbox"] = rec.gt_bbox.as_list()
    channels = []
    for c, r in enumerate(rec.reports):
        ch = {"bbox": r.bbox.as_list(), "observables": list(r.observables)}
        if rec.correct is not None:
            ch["correct"] = bool(rec.correct[c])
        channels.append(ch)
    d["channels"] = channels
    if rec.detection is not None and rec.detection.present:
        det = {"bbox": rec.detection.bbox.as_list()}
        if rec.detection_tp is not None:
            det["tp"] = bool(rec.detection_tp)
        d["detection"] = det
    if rec.shared:
        d["shared"] = list(rec.shared)
    return d


def record_from_dict(d: dict, header: TraceHeader) -> TraceRecord:
    _check_keys(d, {"frame", "gt_bbox", "channels", "detection", "shared"}, {"frame", "channels"}, "record")
    frame = d["frame"]
    if type(frame) is not int or frame < 1:
        raise ValueError("frame must be a positive integer")
    chans = d["channels"]
    if not isinstance(chans, list) or len(chans) != header.n:
        raise ValueError(f"expected {header.n} channels")
    reports, correct = [], []
    for c, (ch, dim) in enumerate(zip(chans, header.layout.tracker_dims)):
        _check_keys(ch, {"bbox", "observables", "correct"}, {"bbox", "observables"}, f"channel {c}")
        reports.append(TrackerReport(_bbox(ch["bbox"], f"channel {c} bbox"),
                                     _observables(ch["observables"], dim, f"channel {c} observables")))
        if "correct" in ch:
            if not isinstance(ch["correct"], bool):
                raise ValueError(f"channel {c} correct must be true or false")
            correct.append(ch["correct"])
    if correct and len(correct) != header.n:
        raise ValueError("either every channel or none carries a correct flag")
    gt = _bbox(d["gt_bbox"], "gt_bbox") if "gt_bbox" in d else None
    detection, tp = None, None
    if "detection" in d:
        det = d["detection"]
        _check_keys(det, {"bbox", "tp"}, {"bbox"}, "detection")
        detection = DetectionEvent(_bbox(det["bbox"], "detection bbox"))
        if "tp" in det:
            if not isinstance(det["tp"], bool):
                raise ValueError("detection tp must be true or false")
            tp = det["tp"]
    shared = _observables(d.get("shared", []), header.layout.shared, "shared observables")
    return TraceRecord(frame, reports, gt, correct or None, detection, tp, shared)


def write_trace(dest: Union[PathLike, IO[str]], header: TraceHeader, records: Iterable[TraceRecord]):
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            return write_trace(fh, header, records)
    dest.write(_dumps(header.to_dict()) + "\n")
    for rec in records:
        dest.write(_dumps(record_to_dict(rec)) + "\n")


def dumps_trace(header: TraceHeader, records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace(buf, header, records)
    return buf.getvalue()


def iter_trace(src: Union[PathLike, IO[str]]) -> Iterator[Union[TraceHeader, TraceRecord]]:
    """Yield the header, then each record, validating as it goes.

    Blank lines are skipped. Frames must be numbered 1, 2, 3, ... in order.
    """
    if isinstance(src, (str, Path)):
        with open(src, encoding="utf-8") as fh:
            yield from iter_trace(fh)
        return
    header = None
    expected = 1
    for lineno, line in enumerate(src, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if header is None:
                header = header_from_dict(obj)
                yield header
                continue
            rec = record_from_dict(obj, header)
            if rec.frame != expected:
                raise ValueError(f"expected frame {expected}, got {rec.frame}")
        except (ValueError, TypeError) as exc:
            raise TraceFormatError(lineno, str(exc)) from None
        expected += 1
        yield rec
    if header is None:
        raise TraceFormatError(1, "empty trace: no header line")


def read_trace(src: Union[PathLike, IO[str]]) -> tuple[TraceHeader, list[TraceRecord]]:
    it = iter_trace(src)
    header = next(it)
    return header, list(it)


def loads_trace(text: str) -> tuple[TraceHeader, list[TraceRecord]]:
    return read_trace(io.StringIO(text))


# --- parameters ---------------------------------------------------------------

def params_to_dict(params: HmmParams) -> dict:
    return {
        "n": params.n,
        "transitions": params.transitions.tolist(),
        "p": params.emissions.p.tolist(),
        "q": params.emissions.q.tolist(),
    }


def params_from_dict(d: dict) -> HmmParams:
    try:
        _check_keys(d, {"n", "transitions", "p", "q"}, {"transitions", "p", "q"}, "params")
        a = np.array(d["transitions"], dtype=float)
        params = HmmParams(a, ObservableModel(d["p"], d["q"]))
    except (ValueError, TypeError) as exc:
        raise ParamsFormatError(f"invalid parameter file: {exc}") from None
    if "n" in d and d["n"] != params.n:
        raise ParamsFormatError(f"params declare n={d['n']} but hold {params.n_states} states")
    return params


def save_params(path: PathLike, params: HmmParams):
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1) + "\n", encoding="utf-8")


def load_params(path: PathLike) -> HmmParams:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParamsFormatError(f"invalid parameter file: {exc}") from None
    return params_from_dict(d)


# --- run reports --------------------------------------------------------------

def report_columns(n: int) -> list[str]:
    N = 2**n
    return (
        ["frame", "x", "y", "w", "h", "source", "state", "state_bits", "detection", "annotation"]
        + [f"p{i}" for i in range(N)]
        + [f"marginal{c}" for c in range(n)]
    )


def write_report(dest: Union[PathLike, IO[str]], outputs: Sequence[FusionOutput], n: int):
    """Per-frame CSV: output box, source, best state, full posterior and marginals."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            return write_report(fh, outputs, n)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(report_columns(n))
    for o in outputs:
        bits = format(2**n - 1 - o.state, f"0{n}b")
        w.writerow(
            [o.frame, *map(repr, o.bbox.as_list()), o.source, o.state, bits, o.detection,
             "" if o.annotation is None else o.annotation]
            + [repr(float(v)) for v in o.posterior]
            + [repr(float(v)) for v in o.marginals]
        )


def read_report_boxes(src: Union[PathLike, IO[str]]) -> list[BBox]:
    """Output boxes from a run report, in frame order."""
    if isinstance(src, (str, Path)):
        with open(src, encoding="utf-8", newline="") as fh:
            return read_report_boxes(fh)
    boxes = []
    reader = csv.DictReader(src)
    for k, row in enumerate(reader, start=2):
        try:
            boxes.append(BBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(k, f"bad report row: {exc}") from None
    return boxes
