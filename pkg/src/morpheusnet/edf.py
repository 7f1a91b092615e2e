"""EDF/EDF+ reading and writing: fixed-width headers, int16 records, TAL annotations.

The parser works on raw bytes and reports failures as ``EdfParseError`` with
the byte offset where decoding went wrong; it never raises anything else on
malformed input. The writer produces files the parser reads back exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import STAGES


class EdfParseError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


@dataclass
class EdfSignalHeader:
    label: str
    transducer: str = ""
    physical_dim: str = ""
    physical_min: float = -1000.0
    physical_max: float = 1000.0
    digital_min: int = -32768
    digital_max: int = 32767
    prefilter: str = ""
    samples_per_record: int = 0
    reserved: str = ""


@dataclass
class EdfHeader:
    version: str = "0"
    patient: str = ""
    recording: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    header_bytes: int = 0
    reserved: str = ""
    num_records: int = 0
    record_duration_s: float = 1.0
    num_signals: int = 0
    signals: list[EdfSignalHeader] = field(default_factory=list)


@dataclass
class Annotation:
    onset_s: float
    duration_s: float | None
    label: str


@dataclass
class Hypnogram:
    """Per-epoch stage labels; ``None`` marks epochs excluded from scoring."""

    stages: list[str | None]
    epoch_duration_s: int = 30

    def __post_init__(self) -> None:
        for s in self.stages:
            if s is not None and s not in STAGES:
                raise ValueError(f"unknown stage label {s!r}")


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise EdfParseError(self.pos, f"truncated file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def text(self, n: int, what: str) -> str:
        return self.take(n, what).decode("latin-1").rstrip()

    def integer(self, n: int, what: str) -> int:
        start = self.pos
        raw = self.text(n, what).strip()
        try:
            return int(raw)
        except ValueError:
            raise EdfParseError(start, f"{what} is not an integer: {raw!r}") from None

    def number(self, n: int, what: str) -> float:
        start = self.pos
        raw = self.text(n, what).strip()
        try:
            return float(raw)
        except ValueError:
            raise EdfParseError(start, f"{what} is not a number: {raw!r}") from None


class EdfFile:
    """Parsed header plus lazy access to the decoded signals."""

    def __init__(self, header: EdfHeader, raw: bytes):
        self.header = header
        self._raw = raw

    def digital(self, index: int) -> np.ndarray:
        """All records of one signal as int16, concatenated in time order."""
        h = self.header
        sig = h.signals[index]
        per_record = [s.samples_per_record for s in h.signals]
        record_words = sum(per_record)
        start = h.header_bytes
        body = np.frombuffer(self._raw, dtype="<i2", offset=start,
                             count=record_words * h.num_records)
        body = body.reshape(h.num_records, record_words)
        col = sum(per_record[:index])
        return body[:, col:col + sig.samples_per_record].reshape(-1)

    def physical(self, index: int) -> np.ndarray:
        """Digital samples mapped to physical units via the header calibration."""
        sig = self.header.signals[index]
        d = self.digital(index).astype(np.float64)
        gain = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
        return (d - sig.digital_min) * gain + sig.physical_min

    def annotation_bytes(self, index: int) -> list[bytes]:
        """Raw per-record byte streams of an annotations signal."""
        h = self.header
        sig = h.signals[index]
        per_record = [s.samples_per_record for s in h.signals]
        record_bytes = sum(per_record) * 2
        start = h.header_bytes + sum(per_record[:index]) * 2
        out = []
        for r in range(h.num_records):
            base = start + r * record_bytes
            out.append(self._raw[base:base + sig.samples_per_record * 2])
        return out

    def annotations(self) -> list[Annotation]:
        out: list[Annotation] = []
        for i, sig in enumerate(self.header.signals):
            if sig.label == "EDF Annotations":
                for record in self.annotation_bytes(i):
                    out.extend(parse_tal(record))
        return out


def parse_edf(data: bytes) -> EdfFile:
    """Decode an EDF/EDF+ byte string into a header and signal accessors."""
    if len(data) < 256:
        raise EdfParseError(len(data), "file shorter than the 256-byte header")
    cur = _Cursor(data)
    h = EdfHeader()
    h.version = cur.text(8, "version")
    h.patient = cur.text(80, "patient")
    h.recording = cur.text(80, "recording")
    h.start_date = cur.text(8, "start date")
    h.start_time = cur.text(8, "start time")
    h.header_bytes = cur.integer(8, "header byte count")
    h.reserved = cur.text(44, "reserved")
    h.num_records = cur.integer(8, "record count")
    h.record_duration_s = cur.number(8, "record duration")
    h.num_signals = cur.integer(4, "signal count")
    if h.num_signals < 0:
        raise EdfParseError(252, "negative signal count")
    if h.num_records < 0:
        raise EdfParseError(236, "negative record count")
    if h.header_bytes != 256 * (1 + h.num_signals):
        raise EdfParseError(
            184, f"header byte count {h.header_bytes} != 256 * (1 + {h.num_signals})"
        )
    if len(data) < h.header_bytes:
        raise EdfParseError(len(data), "truncated signal header block")

    ns = h.num_signals
    sigs = [EdfSignalHeader(label="") for _ in range(ns)]
    for s in sigs:
        s.label = cur.text(16, "signal label")
    for s in sigs:
        s.transducer = cur.text(80, "transducer")
    for s in sigs:
        s.physical_dim = cur.text(8, "physical dimension")
    for s in sigs:
        s.physical_min = cur.number(8, "physical minimum")
    for s in sigs:
        s.physical_max = cur.number(8, "physical maximum")
    for s in sigs:
        s.digital_min = cur.integer(8, "digital minimum")
    for s in sigs:
        s.digital_max = cur.integer(8, "digital maximum")
    for s in sigs:
        s.prefilter = cur.text(80, "prefilter")
    for s in sigs:
        s.samples_per_record = cur.integer(8, "samples per record")
    for s in sigs:
        s.reserved = cur.text(32, "per-signal reserved")
    h.signals = sigs

    for i, s in enumerate(sigs):
        if s.digital_min >= s.digital_max:
            raise EdfParseError(h.header_bytes, f"signal {i}: digital_min >= digital_max")
        if s.physical_min == s.physical_max:
            raise EdfParseError(h.header_bytes, f"signal {i}: flat physical range")
        if s.samples_per_record < 0:
            raise EdfParseError(h.header_bytes, f"signal {i}: negative samples per record")

    body_needed = sum(s.samples_per_record for s in sigs) * 2 * h.num_records
    if len(data) < h.header_bytes + body_needed:
        raise EdfParseError(len(data), "truncated data records")
    return EdfFile(h, data)


def _fixed(text: str, width: int, offset_hint: str) -> bytes:
    raw = text.encode("latin-1")
    if len(raw) > width:
        raise ValueError(f"{offset_hint} does not fit in {width} bytes: {text!r}")
    return raw.ljust(width)


def _fixed_number(value, width: int, what: str) -> bytes:
    if isinstance(value, (int, np.integer)):
        text = str(int(value))
    else:
        f = float(value)
        text = str(int(f)) if f == int(f) else repr(f)
        if len(text) > width:
            text = f"{f:.{max(1, width - 7)}g}"
        if float(text) != f:
            raise ValueError(f"{what} {value!r} cannot be written exactly in {width} bytes")
    return _fixed(text, width, what)


def write_edf(header: EdfHeader, signals: list[np.ndarray]) -> bytes:
    """Serialize digital int16 signals under the given header.

    ``signals[i]`` must hold ``num_records * samples_per_record`` values for
    signal ``i``. The result parses back to identical header fields and
    identical samples.
    """
    ns = len(header.signals)
    if len(signals) != ns:
        raise ValueError(f"{ns} signal headers but {len(signals)} signal arrays")
    if header.num_signals and header.num_signals != ns:
        raise ValueError("header num_signals disagrees with the signal list")
    header_bytes = 256 * (1 + ns)

    for i, (sig, data) in enumerate(zip(header.signals, signals)):
        data = np.asarray(data)
        if sig.digital_min >= sig.digital_max:
            raise ValueError(f"signal {i}: digital_min must be < digital_max")
        if sig.physical_min == sig.physical_max:
            raise ValueError(f"signal {i}: physical range must not be flat")
        if data.size != header.num_records * sig.samples_per_record:
            raise ValueError(
                f"signal {i}: expected {header.num_records * sig.samples_per_record}"
                f" samples, got {data.size}"
            )

    out = bytearray()
    out += _fixed(header.version, 8, "version")
    out += _fixed(header.patient, 80, "patient")
    out += _fixed(header.recording, 80, "recording")
    out += _fixed(header.start_date, 8, "start date")
    out += _fixed(header.start_time, 8, "start time")
    out += _fixed(str(header_bytes), 8, "header bytes")
    out += _fixed(header.reserved, 44, "reserved")
    out += _fixed(str(header.num_records), 8, "record count")
    out += _fixed_number(header.record_duration_s, 8, "record duration")
    out += _fixed(str(ns), 4, "signal count")
    for s in header.signals:
        out += _fixed(s.label, 16, "label")
    for s in header.signals:
        out += _fixed(s.transducer, 80, "transducer")
    for s in header.signals:
        out += _fixed(s.physical_dim, 8, "physical dimension")
    for s in header.signals:
        out += _fixed_number(s.physical_min, 8, "physical minimum")
    for s in header.signals:
        out += _fixed_number(s.physical_max, 8, "physical maximum")
    for s in header.signals:
        out += _fixed_number(s.digital_min, 8, "digital minimum")
    for s in header.signals:
        out += _fixed_number(s.digital_max, 8, "digital maximum")
    for s in header.signals:
        out += _fixed(s.prefilter, 80, "prefilter")
    for s in header.signals:
        out += _fixed_number(s.samples_per_record, 8, "samples per record")
    for s in header.signals:
        out += _fixed(s.reserved, 32, "per-signal reserved")

    arrays = [np.ascontiguousarray(np.asarray(d, dtype="<i2")) for d in signals]
    for r in range(header.num_records):
        for sig, data in zip(header.signals, arrays):
            n = sig.samples_per_record
            out += data[r * n:(r + 1) * n].tobytes()
    return bytes(out)


def _parse_tal_number(raw: bytes, offset: int, what: str) -> float:
    text = raw.decode("latin-1")
    try:
        return float(text)
    except ValueError:
        raise EdfParseError(offset, f"bad {what}: {text!r}") from None


def parse_tal(record: bytes) -> list[Annotation]:
    """Decode one annotations record: a sequence of 0x00-terminated TALs.

    Each TAL is ``onset [0x15 duration] 0x14 (label 0x14)* 0x00`` with a
    mandatory sign on the onset. Empty labels (including the timekeeping TAL
    that starts every record) produce no annotations.
    """
    out: list[Annotation] = []
    pos = 0
    n = len(record)
    while pos < n and record[pos] != 0:
        start = pos
        end = record.find(b"\x00", pos)
        if end < 0:
            raise EdfParseError(start, "unterminated annotation (missing 0x00)")
        tal = record[pos:end]
        sep = tal.find(b"\x14")
        if sep < 0:
            raise EdfParseError(start, "annotation without 0x14 separator")
        head, rest = tal[:sep], tal[sep + 1:]
        if not head or head[0] not in b"+-":
            raise EdfParseError(start, "onset must start with '+' or '-'")
        if b"\x15" in head:
            onset_raw, duration_raw = head.split(b"\x15", 1)
            onset = _parse_tal_number(onset_raw, start, "onset")
            duration = _parse_tal_number(duration_raw, start, "duration")
            if duration < 0:
                raise EdfParseError(start, "negative duration")
        else:
            onset = _parse_tal_number(head, start, "onset")
            duration = None
        for label_raw in rest.split(b"\x14"):
            label = label_raw.decode("latin-1")
            if label:
                out.append(Annotation(onset, duration, label))
        pos = end + 1
    return out


_STAGE_LABELS = {
    "Sleep stage W": "W",
    "Sleep stage 1": "N1",
    "Sleep stage 2": "N2",
    "Sleep stage 3": "N3",
    "Sleep stage 4": "N3",  # the older six-stage scheme folds stage 4 into N3
    "Sleep stage R": "REM",
    "Sleep stage N1": "N1",
    "Sleep stage N2": "N2",
    "Sleep stage N3": "N3",
    "W": "W", "N1": "N1", "N2": "N2", "N3": "N3", "N4": "N3",
    "R": "REM", "REM": "REM",
    "1": "N1", "2": "N2", "3": "N3", "4": "N3",
}


def map_stage(label: str) -> str | None:
    """Canonical stage for a scoring label, or None for excluded epochs.

    Movement, unscored markers, and anything unrecognized reject the epoch.
    """
    return _STAGE_LABELS.get(label.strip())


def hypnogram_from_annotations(annotations: list[Annotation],
                               epoch_duration_s: int = 30) -> Hypnogram:
    """Per-epoch stages from stage annotations; unmapped spans stay None."""
    end = 0.0
    for a in annotations:
        end = max(end, a.onset_s + (a.duration_s or epoch_duration_s))
    n = int(end // epoch_duration_s)
    stages: list[str | None] = [None] * n
    for a in annotations:
        stage = map_stage(a.label)
        if stage is None:
            continue
        first = int(a.onset_s // epoch_duration_s)
        count = int((a.duration_s or epoch_duration_s) // epoch_duration_s)
        for i in range(first, min(first + count, n)):
            stages[i] = stage
    return Hypnogram(stages, epoch_duration_s)
