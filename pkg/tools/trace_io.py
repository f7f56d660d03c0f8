"""
Trace file I/O for Quiet Meter
CSV ingestion of labeled household traces and export of traces and control logs
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
import yaml

from core.household import DEFAULT_HYPOTHESES, Trace, slot_runs

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("slot", "watts", "label")


class TraceFormatError(ValueError):
    """Malformed trace row; the message names the file line"""


def load_alphabet(path: Union[str, Path]) -> Tuple[str, ...]:
    """Read a sidecar alphabet: a YAML list of hypothesis names in index order"""
    alphabet_path = Path(path)
    if not alphabet_path.exists():
        raise FileNotFoundError(f"Alphabet file not found: {path}")
    with open(alphabet_path, 'r') as f:
        names = yaml.safe_load(f)
    if not isinstance(names, list) or not names:
        raise ValueError(f"Alphabet file {path} must hold a non-empty list of names")
    return tuple(str(name) for name in names)


def _first_content_line(path: Path) -> str:
    with open(path, 'r') as f:
        for line in f:
            if line.strip():
                return line.strip()
    return ""


def _parse_numbers(values: pd.Series, lines: pd.Series, column: str) -> pd.Series:
    parsed = pd.to_numeric(values.str.strip(), errors='coerce')
    bad = parsed.isna()
    if bad.any():
        first = bad.idxmax()
        raise TraceFormatError(f"line {lines[first]}: cannot parse {column} {values[first]!r}")
    return parsed


def _parse_labels(values: pd.Series, lines: pd.Series, alphabet: Sequence[str]) -> np.ndarray:
    stripped = values.str.strip()
    numeric = pd.to_numeric(stripped, errors='coerce')
    if not numeric.isna().any():
        return numeric.astype(int).to_numpy()

    lookup = {name.upper(): index for index, name in enumerate(alphabet)}
    mapped = stripped.str.upper().map(lookup)
    unknown = mapped.isna()
    if unknown.any():
        first = unknown.idxmax()
        raise TraceFormatError(
            f"line {lines[first]}: label {values[first]!r} not in alphabet {list(alphabet)}"
        )
    return mapped.astype(int).to_numpy()


def load_trace(path: Union[str, Path], alphabet: Optional[Sequence[str]] = None) -> Trace:
    """
    Load a household trace from CSV

    Files with a `slot,watts[,label]` header are read by column; a headerless
    file holds one watts value per line with slots numbered from 0. Labels may
    be integer indices or names from the alphabet, matched case-insensitively.

    Args:
        path: CSV file
        alphabet: Hypothesis names (defaults to OFF/ON)

    Returns:
        Trace with raw, unquantized watts

    Raises:
        FileNotFoundError: If the file does not exist
        TraceFormatError: On malformed rows or negative watts, naming the line
    """
    trace_path = Path(path)
    if not trace_path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")

    names = tuple(alphabet) if alphabet else DEFAULT_HYPOTHESES
    has_header = _first_content_line(trace_path).lower().startswith("slot")

    try:
        frame = pd.read_csv(
            trace_path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
        )
    except pd.errors.ParserError as e:
        raise TraceFormatError(f"{trace_path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise TraceFormatError(f"{trace_path}: file is empty") from e

    frame = frame.fillna('')
    lines = pd.Series(frame.index + (2 if has_header else 1), index=frame.index)
    populated = frame.apply(lambda row: any(str(cell).strip() for cell in row), axis=1)
    frame, lines = frame[populated], lines[populated]

    if has_header:
        frame.columns = [str(column).strip().lower() for column in frame.columns]
        missing = [column for column in ("slot", "watts") if column not in frame.columns]
        if missing:
            raise TraceFormatError(f"{trace_path}: missing columns {missing}")
        unknown = [column for column in frame.columns if column not in TRACE_COLUMNS]
        if unknown:
            raise TraceFormatError(f"{trace_path}: unexpected columns {unknown}")
    else:
        if frame.shape[1] != 1:
            raise TraceFormatError(f"{trace_path}: headerless traces hold a single watts column")
        frame.columns = ["watts"]

    if frame.empty:
        raise TraceFormatError(f"{trace_path}: no data rows")

    watts = _parse_numbers(frame["watts"], lines, "watts")
    negative = watts < 0
    if negative.any():
        first = negative.idxmax()
        raise TraceFormatError(f"line {lines[first]}: negative watts {watts[first]}")

    if has_header:
        slots = _parse_numbers(frame["slot"], lines, "slot")
        fractional = slots != slots.round()
        if fractional.any():
            first = fractional.idxmax()
            raise TraceFormatError(f"line {lines[first]}: slot {slots[first]} is not an integer")
        slot_values = slots.astype(int).to_numpy()
    else:
        slot_values = np.arange(len(frame))

    labels = None
    if "label" in frame.columns:
        labels = _parse_labels(frame["label"], lines, names)
        if np.any(labels < 0) or np.any(labels >= len(names)):
            raise TraceFormatError(f"{trace_path}: label index outside alphabet {list(names)}")

    logger.info(f"Loaded {len(frame)} slots from {trace_path}")
    return Trace(slots=slot_values, x_watts=watts.to_numpy(dtype=float), h_labels=labels, hypothesis_names=names)


def trace_frame(trace: Trace) -> pd.DataFrame:
    frame = pd.DataFrame({"slot": trace.slots, "watts": trace.x_watts})
    if trace.labeled:
        frame["label"] = [trace.hypothesis_names[h] for h in trace.h_labels]
    return frame


def save_trace(trace: Trace, path: Union[str, Path]) -> Path:
    """Write a trace with a `slot,watts[,label]` header, labels by name"""
    trace_path = Path(path)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(trace).to_csv(trace_path, index=False)
    return trace_path


def save_days(days: Sequence[Trace], path: Union[str, Path]) -> Path:
    """Write several days into one trace file; slots restart each day"""
    trace_path = Path(path)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat([trace_frame(day) for day in days], ignore_index=True).to_csv(trace_path, index=False)
    return trace_path


def split_days(trace: Trace) -> List[Trace]:
    """Split a trace wherever its slot index fails to advance by one"""
    return [
        Trace(
            slots=trace.slots[run],
            x_watts=trace.x_watts[run],
            h_labels=None if trace.h_labels is None else trace.h_labels[run],
            hypothesis_names=trace.hypothesis_names,
        )
        for run in slot_runs(trace.slots)
    ]


def read_control_log(path: Union[str, Path]) -> pd.DataFrame:
    """Read an exported control log; the meter output is the `y` column"""
    log_path = Path(path)
    if not log_path.exists():
        raise FileNotFoundError(f"Control log not found: {path}")
    frame = pd.read_csv(log_path)
    missing = [column for column in ("slot", "x", "y", "d", "z", "loss") if column not in frame.columns]
    if missing:
        raise TraceFormatError(f"{log_path}: not a control log, missing {missing}")
    return frame
