"""File formats: edges / presence TSV, labels CSV, params JSON and the
auxiliary outputs written by the command line.

Indices are 1-based in files and 0-based in memory. Floats are written
with ``repr`` (shortest round-tripping form), so every reader recovers the
exact value written.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from dynsbm.emissions import family_from_dict
from dynsbm.model_core import ABSENT, DynamicNetwork, ModelParams


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, line, message):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path, self.line = path, line


def _fmt(x) -> str:
    return repr(float(x))


def _read_lines(path):
    raw = Path(path).read_bytes()
    if b"\r" in raw:
        raise FormatError(path, raw[:raw.index(b"\r")].count(b"\n") + 1,
                          "CRLF / CR line endings are not accepted; convert to LF")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, None, f"not valid UTF-8 ({exc})") from None
    return text.split("\n")


def _rows(path, header, sep):
    lines = _read_lines(path)
    if not lines or lines[0] != sep.join(header):
        raise FormatError(path, 1, f"expected header {sep.join(header)!r}")
    for n, line in enumerate(lines[1:], start=2):
        if line == "":
            if n == len(lines):
                break
            raise FormatError(path, n, "empty line")
        parts = line.split(sep)
        if len(parts) != len(header):
            raise FormatError(path, n, f"expected {len(header)} fields, got {len(parts)}")
        yield n, parts


def _int(path, n, s, name, lo=1):
    try:
        v = int(s)
    except ValueError:
        raise FormatError(path, n, f"{name} must be an integer, got {s!r}") from None
    if v < lo:
        raise FormatError(path, n, f"{name} must be >= {lo}, got {v}")
    return v


# --------------------------------------------------------------------------
# edges and presence

def write_edges(path, net: DynamicNetwork) -> None:
    out = ["t\ti\tj\tw"]
    for t in range(net.n_steps):
        ii, jj = np.nonzero(np.triu(net.weights[t], 1))
        for i, j in zip(ii, jj):
            out.append(f"{t + 1}\t{i + 1}\t{j + 1}\t{_fmt(net.weights[t, i, j])}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_edges(path):
    """List of 0-based ``(t, i, j, w)`` plus the largest t and node id seen."""
    edges, seen = [], set()
    max_t = max_i = 0
    for n, (t, i, j, w) in _rows(path, ("t", "i", "j", "w"), "\t"):
        t, i, j = (_int(path, n, s, name) for s, name in ((t, "t"), (i, "i"), (j, "j")))
        if not i < j:
            raise FormatError(path, n, f"pairs must be stored once with i < j, got i={i}, j={j}")
        try:
            val = float(w)
        except ValueError:
            raise FormatError(path, n, f"w must be a real number, got {w!r}") from None
        if not math.isfinite(val) or val == 0:
            raise FormatError(path, n, f"w must be finite and nonzero, got {w!r}")
        if (t, i, j) in seen:
            raise FormatError(path, n, f"duplicate pair ({t}, {i}, {j})")
        seen.add((t, i, j))
        edges.append((t - 1, i - 1, j - 1, val))
        max_t, max_i = max(max_t, t), max(max_i, j)
    return edges, max_t, max_i


def write_presence(path, presence) -> None:
    presence = np.asarray(presence, dtype=bool)
    out = ["t\ti"] + [f"{t + 1}\t{i + 1}" for t, i in zip(*np.nonzero(presence))]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_presence(path):
    cells = []
    for n, (t, i) in _rows(path, ("t", "i"), "\t"):
        cells.append((_int(path, n, t, "t") - 1, _int(path, n, i, "i") - 1))
    return cells


def load_network(edges_path, presence_path=None, n_nodes=None, n_steps=None) -> DynamicNetwork:
    """Assemble a network; sizes default to the largest ids in the files."""
    edges, max_t, max_i = read_edges(edges_path)
    cells = read_presence(presence_path) if presence_path else []
    if cells:
        max_t = max(max_t, max(t for t, _ in cells) + 1)
        max_i = max(max_i, max(i for _, i in cells) + 1)
    T = n_steps or max_t
    N = n_nodes or max_i
    if T < max_t or N < max_i:
        raise FormatError(edges_path, None, f"ids exceed the declared size (T={T}, N={N})")
    presence = None
    if presence_path:
        presence = np.zeros((T, N), dtype=bool)
        for t, i in cells:
            presence[t, i] = True
    return DynamicNetwork.from_edges(N, T, edges, presence)


# --------------------------------------------------------------------------
# labels

def write_labels(path, labels) -> None:
    z = np.asarray(labels)
    out = ["t,i,group"]
    for t in range(z.shape[0]):
        for i in range(z.shape[1]):
            g = 0 if z[t, i] == ABSENT else int(z[t, i]) + 1
            out.append(f"{t + 1},{i + 1},{g}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_labels(path) -> np.ndarray:
    rows = [(n, [_int(path, n, s, k, lo=0 if k == "group" else 1)
                 for s, k in zip(parts, ("t", "i", "group"))])
            for n, parts in _rows(path, ("t", "i", "group"), ",")]
    if not rows:
        raise FormatError(path, None, "no label rows")
    T = max(r[0] for _, r in rows)
    N = max(r[1] for _, r in rows)
    z = np.full((T, N), ABSENT, dtype=int)
    seen = np.zeros((T, N), dtype=bool)
    for n, (t, i, g) in rows:
        if seen[t - 1, i - 1]:
            raise FormatError(path, n, f"duplicate row for t={t}, i={i}")
        seen[t - 1, i - 1] = True
        z[t - 1, i - 1] = g - 1 if g > 0 else ABSENT
    return z


# --------------------------------------------------------------------------
# params

PARAMS_KEYS = ("q", "t", "family", "pi", "alpha", "beta_diag", "beta_offdiag",
               "gamma_diag", "gamma_offdiag", "sigma2")


def _tolist(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def params_to_dict(params: ModelParams) -> dict:
    return {
        "q": params.n_groups,
        "t": params.n_steps,
        "family": params.family.to_dict(),
        "pi": _tolist(params.pi),
        "alpha": _tolist(params.alpha),
        "beta_diag": _tolist(params.beta_diag),
        "beta_offdiag": _tolist(params.beta_off),
        "gamma_diag": _tolist(params.gamma_diag),
        "gamma_offdiag": _tolist(params.gamma_off),
        "sigma2": _tolist(params.sigma2),
    }


def params_from_dict(d: dict) -> ModelParams:
    unknown = set(d) - set(PARAMS_KEYS)
    if unknown:
        raise ValueError(f"unknown params keys: {sorted(unknown)}")
    missing = {"q", "family", "pi", "alpha", "beta_diag", "beta_offdiag"} - set(d)
    if missing:
        raise ValueError(f"missing params keys: {sorted(missing)}")
    fam = family_from_dict(d["family"])
    q = int(d["q"])
    off = np.asarray(d["beta_offdiag"], dtype=float)
    if off.ndim == 1:
        off = off.reshape(-1, 0) if q == 1 else off[None]

    def arr(key):
        return None if d.get(key) is None else np.asarray(d[key], dtype=float)

    params = ModelParams(fam, arr("pi"), arr("alpha"), arr("beta_diag"), off,
                         arr("gamma_diag"), arr("gamma_offdiag"), arr("sigma2"))
    if params.n_groups != q:
        raise ValueError(f"q={q} disagrees with pi of size {params.n_groups}")
    if "t" in d and params.n_steps != int(d["t"]):
        raise ValueError(f"t={d['t']} disagrees with beta_offdiag length {params.n_steps}")
    params.validate()
    return params


def _dumps(obj) -> str:
    # json uses float.__repr__, which round-trips exactly
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_params(path, params: ModelParams) -> None:
    Path(path).write_text(_dumps(params_to_dict(params)), encoding="utf-8")


def read_params(path) -> ModelParams:
    lines = _read_lines(path)
    try:
        d = json.loads("\n".join(lines))
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from None
    if not isinstance(d, dict):
        raise FormatError(path, 1, "params file must hold a JSON object")
    try:
        return params_from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(path, None, str(exc)) from None


# --------------------------------------------------------------------------
# auxiliary outputs

def write_json(path, obj) -> None:
    Path(path).write_text(_dumps(obj), encoding="utf-8")


def write_trace(path, trace) -> None:
    out = ["iteration,elbo"] + [f"{k},{_fmt(v)}" for k, v in enumerate(trace)]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def write_fluxes(path, fluxes) -> None:
    out = ["t,from,to,count"]
    for k, table in enumerate(fluxes):
        for a, b in zip(*np.nonzero(table)):
            out.append(f"{k + 2},{a},{b},{int(table[a, b])}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def write_elbow(path, curve) -> None:
    out = ["q,complete_ll"] + [f"{q},{_fmt(v)}" for q, v in curve]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
