"""Market CSV files, truth sidecars, result tables and run manifests.

Market CSV (UTF-8, ``\\n`` line endings)::

    market_id,chi,x_level,share_1,...,share_J,d_1,...,d_K

``x_level`` is 1-based on disk. Floats are written with ``repr``, the
shortest decimal string that round-trips (at most 17 significant digits).
The truth sidecar repeats those columns and appends
``eps_1..eps_J,signal_group_1..signal_group_K`` (signal labels, empty for
markets without persuasion).
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .model import SIMPLEX_TOL, MarketPanel

MANIFEST_VERSION = 1


class DataValidationError(InputError):
    """Rows of a market file failed validation; ``problems`` maps market id to reasons."""

    def __init__(self, problems: dict):
        self.problems = problems
        lines = [f"{mid}: {'; '.join(r)}" for mid, r in list(problems.items())[:20]]
        more = f"\n... and {len(problems) - 20} more" if len(problems) > 20 else ""
        super().__init__(f"{len(problems)} invalid market(s):\n" + "\n".join(lines) + more)


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def market_header(J: int, K: int) -> list:
    return ["market_id", "chi", "x_level"] + [f"share_{j + 1}" for j in range(J)] + [f"d_{k + 1}" for k in range(K)]


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _market_row(panel, i):
    return (
        [panel.ids[i], fmt(int(panel.chi[i])), fmt(int(panel.level[i]) + 1)]
        + [fmt(x) for x in panel.shares[i]]
        + [fmt(x) for x in panel.demo[i]]
    )


def write_markets_csv(path, panel: MarketPanel) -> None:
    _write_rows(path, market_header(panel.J, panel.K), (_market_row(panel, i) for i in range(len(panel))))


def write_truth_csv(path, panel: MarketPanel, truth, signals=("+", "-")) -> None:
    J, K = panel.J, panel.K
    header = market_header(J, K) + [f"eps_{j + 1}" for j in range(J)] + [f"signal_group_{k + 1}" for k in range(K)]
    rows = []
    for i in range(len(panel)):
        sig = ["" if s < 0 else str(signals[s]) for s in truth.signals[i]]
        rows.append(_market_row(panel, i) + [fmt(x) for x in truth.eps[i]] + sig)
    _write_rows(path, header, rows)


def read_markets_csv(path, J: int | None = None, K: int | None = None, L: int | None = None) -> MarketPanel:
    """Read and validate a market file.

    Every row is checked (shares and demographic weights in the simplex,
    positive outside share, ``chi`` in {0, 1}, level in range, unique ids);
    all problems are reported together with their market ids.
    """
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        share_cols = [h for h in header if h.startswith("share_")]
        demo_cols = [h for h in header if h.startswith("d_")]
        Jf, Kf = len(share_cols), len(demo_cols)
        expected = market_header(Jf, Kf)
        if header[: len(expected)] != expected or Jf < 2 or Kf < 1:
            raise InputError(f"{path}: header must be {','.join(market_header(J or 2, K or 1))}; got {','.join(header)}")
        if J is not None and Jf != J:
            raise InputError(f"{path}: file has J={Jf} options, configuration says J={J}")
        if K is not None and Kf != K:
            raise InputError(f"{path}: file has K={Kf} groups, configuration says K={K}")
        ids, chi, level, shares, demo = [], [], [], [], []
        problems: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            mid = row[0] if row else f"line {lineno}"
            errs = []
            if len(row) < len(expected):
                problems.setdefault(mid, []).append(f"line {lineno}: expected {len(expected)} fields, got {len(row)}")
                continue
            try:
                c = int(row[1])
                lv = int(row[2])
                s = np.array([float(x) for x in row[3 : 3 + Jf]])
                d = np.array([float(x) for x in row[3 + Jf : 3 + Jf + Kf]])
            except ValueError:
                problems.setdefault(mid, []).append(f"line {lineno}: non-numeric field")
                continue
            if c not in (0, 1):
                errs.append(f"chi must be 0 or 1, got {c}")
            if lv < 1 or (L is not None and lv > L):
                errs.append(f"x_level {lv} out of range 1..{L if L is not None else 'L'}")
            if not np.all(np.isfinite(s)) or np.any(s < 0) or abs(s.sum() - 1) > SIMPLEX_TOL:
                errs.append("shares must be nonnegative and sum to 1")
            elif s[-1] <= 0:
                errs.append("outside-option share must be positive")
            if not np.all(np.isfinite(d)) or np.any(d < 0) or abs(d.sum() - 1) > SIMPLEX_TOL:
                errs.append("demographic weights must be nonnegative and sum to 1")
            if mid in problems or mid in ids:
                errs.append("duplicate market_id")
            if errs:
                problems.setdefault(mid, []).extend(errs)
                continue
            ids.append(mid)
            chi.append(c)
            level.append(lv - 1)
            shares.append(s)
            demo.append(d)
    if problems:
        raise DataValidationError(problems)
    if not ids:
        raise InputError(f"{path}: no markets")
    return MarketPanel(tuple(ids), np.array(chi), np.array(shares), np.array(demo), np.array(level))


def reject_zero_inside_shares(panel: MarketPanel) -> None:
    """Markets without persuasion are inverted, so their inside shares must be positive."""
    bad = [(panel.ids[i]) for i in np.flatnonzero((panel.chi == 0) & np.any(panel.shares[:, :-1] <= 0, axis=1))]
    if bad:
        raise DataValidationError({mid: ["zero inside share (log undefined in the share inversion)"] for mid in bad})


def write_table(path, header, rows) -> None:
    _write_rows(path, header, ([fmt(x) if isinstance(x, (float, np.floating, int, np.integer)) else str(x) for x in r] for r in rows))


def read_table(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import joblib
    import scipy
    import yaml

    from . import __version__

    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "joblib": joblib.__version__,
        "pyyaml": yaml.__version__,
        "ripersuasion": __version__,
    }


def write_manifest(out_dir, command: str, config, seed: int, argv, timings: dict, outputs, extra=None) -> Path:
    """Record what produced the files in ``out_dir``.

    The manifest holds the resolved configuration and seed, so passing it
    back as ``--config`` replays the run.
    """
    out_dir = Path(out_dir)
    files = {}
    for p in outputs:
        p = Path(p)
        if p.exists():
            files[p.name] = sha256_file(p)
    body = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config_sha256": config.digest() if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "versions": versions(),
        "timings_seconds": {k: round(v, 6) for k, v in timings.items()},
        "outputs": files,
    }
    if extra:
        body.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
