"""Request traces: final-traces parsing, synthetic generation, cell assignment."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from typing import Iterable, Iterator, Optional, TextIO

import numpy as np

MIN_CONTENT_SIZE = 1
MAX_CONTENT_SIZE = 6_024_000_000
DEFAULT_BITRATE = 4e6
DEFAULT_DURATION = 6 * 3600 + 47 * 60


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Content:
    id: int
    uri_key: str
    size: int
    bitrate: float

    def __post_init__(self):
        if self.size < 1:
            raise TraceError(f"content {self.id}: size must be >= 1, got {self.size}")
        if not self.bitrate > 0:
            raise TraceError(f"content {self.id}: bitrate must be > 0, got {self.bitrate}")


class Catalog:
    """The content library, indexed densely by content id."""

    def __init__(self, contents: Iterable[Content]):
        self.contents = tuple(contents)
        seen = set()
        for i, c in enumerate(self.contents):
            if c.id != i:
                raise TraceError(f"content ids must be 0..F-1 in order, got {c.id} at {i}")
            if c.uri_key in seen:
                raise TraceError(f"duplicate uri_key {c.uri_key!r}")
            seen.add(c.uri_key)
        self.sizes = np.array([c.size for c in self.contents], dtype=np.int64)
        self.bitrates = np.array([c.bitrate for c in self.contents], dtype=float)
        self.sizes.setflags(write=False)
        self.bitrates.setflags(write=False)

    @classmethod
    def from_arrays(cls, sizes, bitrates, uri_keys=None) -> "Catalog":
        sizes = np.asarray(sizes)
        bitrates = np.broadcast_to(np.asarray(bitrates, dtype=float), sizes.shape)
        if uri_keys is None:
            uri_keys = [f"/content/{i}" for i in range(len(sizes))]
        return cls(
            Content(i, k, int(s), float(b))
            for i, (k, s, b) in enumerate(zip(uri_keys, sizes, bitrates))
        )

    def __len__(self) -> int:
        return len(self.contents)

    def __getitem__(self, i: int) -> Content:
        return self.contents[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, Catalog) and self.contents == other.contents

    @property
    def total_bytes(self) -> int:
        return int(self.sizes.sum())


@dataclass(frozen=True)
class Request:
    arrival: float
    content: int
    cell: Optional[int] = None


class RequestLog:
    """Time-ordered requests, stored column-wise.

    ``cells`` is None until the log has been assigned to cells.
    ``skipped_rows`` counts malformed input rows dropped by the parser.
    """

    def __init__(self, arrivals, contents, duration: float, cells=None, skipped_rows: int = 0):
        self.arrivals = np.asarray(arrivals, dtype=float)
        self.contents = np.asarray(contents, dtype=np.int64)
        self.cells = None if cells is None else np.asarray(cells, dtype=np.int64)
        self.duration = float(duration)
        self.skipped_rows = int(skipped_rows)
        if self.arrivals.shape != self.contents.shape:
            raise TraceError("arrivals and contents differ in length")
        if self.cells is not None and self.cells.shape != self.arrivals.shape:
            raise TraceError("cells and arrivals differ in length")
        if len(self.arrivals):
            if np.any(np.diff(self.arrivals) < 0):
                raise TraceError("requests must be sorted by arrival")
            if self.arrivals[0] < 0 or self.arrivals[-1] > self.duration:
                raise TraceError("arrivals must lie in [0, duration]")
        for a in (self.arrivals, self.contents, self.cells):
            if a is not None:
                a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.arrivals)

    def __iter__(self) -> Iterator[Request]:
        return iter(self.requests)

    @property
    def requests(self) -> list[Request]:
        cells = self.cells.tolist() if self.cells is not None else [None] * len(self)
        return [
            Request(a, c, n)
            for a, c, n in zip(self.arrivals.tolist(), self.contents.tolist(), cells)
        ]

    @property
    def assigned(self) -> bool:
        return self.cells is not None

    def check_catalog(self, catalog: Catalog) -> None:
        if len(self) and (self.contents.min() < 0 or self.contents.max() >= len(catalog)):
            raise TraceError("request references a content id absent from the catalog")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RequestLog):
            return NotImplemented
        same_cells = (self.cells is None and other.cells is None) or (
            self.cells is not None
            and other.cells is not None
            and np.array_equal(self.cells, other.cells)
        )
        return (
            same_cells
            and self.duration == other.duration
            and np.array_equal(self.arrivals, other.arrivals)
            and np.array_equal(self.contents, other.contents)
        )


# -- final-traces parsing -------------------------------------------------

_TSHARK_FORMATS = ("%b %d, %Y %H:%M:%S.%f", "%b %d, %Y %H:%M:%S")


def parse_frame_time(text: str) -> float:
    """Seconds as a float, or an absolute timestamp converted to epoch seconds."""
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        pass
    else:
        if math.isfinite(value):
            return value
        raise ValueError(f"non-finite frame time {text!r}")
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError:
        pass
    # tshark prints nanoseconds and a zone name; strptime takes neither
    parts = text.split()
    if len(parts) >= 4:
        stamp = " ".join(parts[:4])
        if "." in stamp:
            head, frac = stamp.rsplit(".", 1)
            stamp = f"{head}.{frac[:6]}"
        for fmt in _TSHARK_FORMATS:
            try:
                return datetime.strptime(stamp, fmt).timestamp()
            except ValueError:
                continue
    raise ValueError(f"unparseable frame time {text!r}")


def parse_final_traces(
    stream: TextIO, default_bitrate: float = DEFAULT_BITRATE
) -> tuple[Catalog, RequestLog]:
    """Read a FRAME-TIME,HTTP-URI,SIZE file into a catalog and request log.

    Malformed rows are skipped and counted in ``RequestLog.skipped_rows``.
    Content ids follow first appearance in arrival order; a URI seen with
    several sizes keeps the largest.
    """
    rows = []
    skipped = 0
    for lineno, row in enumerate(csv.reader(stream)):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            skipped += 1
            continue
        time_text, uri, size_text = row
        try:
            t = parse_frame_time(time_text)
        except ValueError:
            if lineno == 0:
                continue  # header line
            skipped += 1
            continue
        try:
            size = int(size_text.strip())
        except ValueError:
            skipped += 1
            continue
        if size <= 0:
            skipped += 1
            continue
        rows.append((t, uri, size))
    if not rows:
        raise TraceError(f"no valid rows in final-traces input ({skipped} skipped)")

    rows.sort(key=lambda r: r[0])  # stable, so file order breaks ties
    t0 = rows[0][0]
    ids: dict[str, int] = {}
    sizes: list[int] = []
    arrivals = np.empty(len(rows))
    contents = np.empty(len(rows), dtype=np.int64)
    for i, (t, uri, size) in enumerate(rows):
        cid = ids.get(uri)
        if cid is None:
            cid = ids[uri] = len(sizes)
            sizes.append(size)
        elif size > sizes[cid]:
            sizes[cid] = size
        arrivals[i] = t - t0
        contents[i] = cid
    catalog = Catalog.from_arrays(sizes, default_bitrate, list(ids))
    log = RequestLog(arrivals, contents, arrivals[-1], skipped_rows=skipped)
    return catalog, log


def write_final_traces(catalog: Catalog, log: RequestLog, stream: TextIO, header: bool = False) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    if header:
        writer.writerow(["FRAME-TIME", "HTTP-URI", "SIZE"])
    for t, c in zip(log.arrivals.tolist(), log.contents.tolist()):
        content = catalog[c]
        writer.writerow([repr(t), content.uri_key, content.size])


def read_final_traces(path, default_bitrate: float = DEFAULT_BITRATE) -> tuple[Catalog, RequestLog]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_final_traces(fh, default_bitrate)


# -- synthetic traces -----------------------------------------------------


@dataclass(frozen=True)
class SyntheticTraceParams:
    num_contents: int = 16419
    num_requests: int = 422529
    duration: float = float(DEFAULT_DURATION)
    zipf_exponent: float = 1.0
    # mean size exp(11.9 + 2.0**2 / 2) ~ 1.08 MB, close to 17.7 GB / 16419
    size_log_mean: float = 11.9
    size_log_sigma: float = 2.0
    min_size: int = MIN_CONTENT_SIZE
    max_size: int = MAX_CONTENT_SIZE
    bitrate: float = DEFAULT_BITRATE
    seed: int = 0

    def validate(self) -> None:
        if self.num_contents < 1:
            raise TraceError("num_contents must be >= 1")
        if self.num_requests < 1:
            raise TraceError("num_requests must be >= 1")
        if not self.duration > 0:
            raise TraceError("duration must be > 0")
        if not self.zipf_exponent > 0:
            raise TraceError("zipf_exponent must be > 0")
        if self.size_log_sigma < 0:
            raise TraceError("size_log_sigma must be >= 0")
        if not 1 <= self.min_size <= self.max_size:
            raise TraceError("need 1 <= min_size <= max_size")
        if not self.bitrate > 0:
            raise TraceError("bitrate must be > 0")


def zipf_pmf(num_items: int, exponent: float) -> np.ndarray:
    """Probability of each rank 1..num_items under a finite Zipf law."""
    # log-space keeps huge exponents from underflowing to an all-zero vector
    logw = -exponent * np.log(np.arange(1, num_items + 1, dtype=float))
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _truncated_lognormal(rng: np.random.Generator, n: int, mu: float, sigma: float, lo: int, hi: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    for _ in range(1000):
        if not len(todo):
            return out
        draw = np.rint(rng.lognormal(mu, sigma, size=len(todo)))
        ok = (draw >= lo) & (draw <= hi)
        out[todo[ok]] = draw[ok].astype(np.int64)
        todo = todo[~ok]
    raise TraceError("size law puts almost no mass inside [min_size, max_size]")


def generate_synthetic_trace(params: SyntheticTraceParams) -> tuple[Catalog, RequestLog]:
    """Zipf-popular contents with truncated log-normal sizes and uniform arrivals.

    Content id r is the (r+1)-th most popular. Pure function of ``params``.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    sizes = _truncated_lognormal(
        rng, params.num_contents, params.size_log_mean, params.size_log_sigma,
        params.min_size, params.max_size,
    )
    pmf = zipf_pmf(params.num_contents, params.zipf_exponent)
    contents = rng.choice(params.num_contents, size=params.num_requests, p=pmf)
    arrivals = rng.uniform(0.0, params.duration, size=params.num_requests)
    order = np.argsort(arrivals, kind="stable")
    catalog = Catalog.from_arrays(sizes, params.bitrate)
    log = RequestLog(arrivals[order], contents[order], params.duration)
    return catalog, log


# -- cells and statistics -------------------------------------------------


def assign_requests_to_cells(log: RequestLog, num_cells: int, seed: int) -> RequestLog:
    """Draw each request's cell independently and uniformly."""
    if num_cells < 1:
        raise TraceError("num_cells must be >= 1")
    if log.assigned:
        raise TraceError("request log is already assigned to cells")
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, num_cells, size=len(log))
    return RequestLog(log.arrivals, log.contents, log.duration, cells, log.skipped_rows)


@dataclass(frozen=True)
class TraceStats:
    num_requests: int
    num_contents: int
    num_cells: int
    duration: float
    total_requested_bytes: int
    rating_density: float
    skipped_rows: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(TraceStats))

    def to_csv_row(self) -> str:
        return ",".join(str(v) for v in self.as_dict().values())


def trace_stats(catalog: Catalog, log: RequestLog, num_cells: int) -> TraceStats:
    if not log.assigned:
        raise TraceError("trace_stats needs a log assigned to cells")
    log.check_catalog(catalog)
    F = len(catalog)
    pairs = np.unique(log.cells * F + log.contents)
    return TraceStats(
        num_requests=len(log),
        num_contents=F,
        num_cells=num_cells,
        duration=log.duration,
        total_requested_bytes=int(catalog.sizes[log.contents].sum()),
        rating_density=len(pairs) / (num_cells * F),
        skipped_rows=log.skipped_rows,
    )


def final_traces_text(catalog: Catalog, log: RequestLog, header: bool = False) -> str:
    buf = io.StringIO()
    write_final_traces(catalog, log, buf, header)
    return buf.getvalue()
