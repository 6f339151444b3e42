"""Domain model for dilution-series experiments.

A dilution series starts from a tube holding volume V0; a subvolume V is
carried forward and diluted by a factor alpha at each step, and D drops of
volume u are plated from each tube.  Counts above the threshold c are
recorded as "TNTC" (too numerous to count) and treated as right censored.
Censored drops are represented as ``None`` throughout this package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

TNTC_TOKEN = "TNTC"

_REL_TOL = 1e-9


class DataError(ValueError):
    """Raised when an input file or record violates the data contract."""


@dataclass(frozen=True)
class DilutionDesign:
    """Geometry of a dilution experiment.

    alpha0 = V0/V and alpha_p = V/u are the volume ratios that enter the
    counting model; the raw volumes are optional and, when given, must be
    consistent with the ratios.

    Parameters
    ----------
    alpha : dilution factor between consecutive tubes (> 1).
    alpha0 : ratio of tube-0 volume to the common tube volume (>= 1).
    alpha_p : ratio of tube volume to plated drop volume (>= 1).
    J : number of dilutions (tubes 0 .. J-1).
    D : drops plated per dilution.
    c : TNTC threshold; a drop count above c is censored.
    q : per-microbe miscount probability in [0, 1).
    V0, V, u : optional raw volumes (ml).
    Sc : optional specimen size (surface area or volume) for density
        normalization.
    """

    alpha: float = 10.0
    alpha0: float = 1.0
    alpha_p: float = 1000.0
    J: int = 7
    D: int = 10
    c: int = 30
    q: float = 0.05
    V0: float | None = None
    V: float | None = None
    u: float | None = None
    Sc: float | None = None

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if not self.alpha0 >= 1:
            raise ValueError(f"alpha0 must be >= 1, got {self.alpha0}")
        if not self.alpha_p >= 1:
            raise ValueError(f"alpha_p must be >= 1, got {self.alpha_p}")
        if self.J < 1 or self.D < 1 or self.c < 1:
            raise ValueError("J, D and c must all be >= 1")
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"q must be in [0, 1), got {self.q}")
        if self.Sc is not None and not self.Sc > 0:
            raise ValueError("Sc must be positive")
        vols = (self.V0, self.V, self.u)
        if any(v is not None for v in vols):
            if any(v is None for v in vols):
                raise ValueError("give all of V0, V, u or none of them")
            if any(v <= 0 for v in vols):
                raise ValueError("volumes must be positive")
            if not math.isclose(self.alpha0, self.V0 / self.V, rel_tol=_REL_TOL):
                raise ValueError(
                    f"alpha0={self.alpha0} inconsistent with V0/V={self.V0 / self.V}"
                )
            if not math.isclose(self.alpha_p, self.V / self.u, rel_tol=_REL_TOL):
                raise ValueError(
                    f"alpha_p={self.alpha_p} inconsistent with V/u={self.V / self.u}"
                )

    @classmethod
    def from_volumes(cls, V0, V, u, alpha=10.0, J=7, D=10, c=30, q=0.05, Sc=None):
        """Build a design from raw volumes, deriving alpha0 and alpha_p."""
        return cls(
            alpha=float(alpha),
            alpha0=float(V0) / float(V),
            alpha_p=float(V) / float(u),
            J=int(J),
            D=int(D),
            c=int(c),
            q=float(q),
            V0=float(V0),
            V=float(V),
            u=float(u),
            Sc=None if Sc is None else float(Sc),
        )


@dataclass(frozen=True)
class RepetitionCounts:
    """Observed drop counts for one repetition.

    ``drops`` holds the D observations at the selected (lowest countable)
    dilution; a ``None`` entry is a censored drop (recorded TNTC, meaning
    "> c").  Counts recorded at other dilutions, when present, are kept in
    ``other_dilutions`` as (dilution, drops) pairs; default analyses ignore
    them.
    """

    rep_id: str
    selected_dilution: int
    drops: tuple
    other_dilutions: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "drops", tuple(self.drops))
        object.__setattr__(
            self,
            "other_dilutions",
            tuple(sorted((int(j), tuple(d)) for j, d in self.other_dilutions)),
        )
        if self.selected_dilution < 0:
            raise ValueError("selected_dilution must be >= 0")
        for d in self.all_dilutions():
            for y in d[1]:
                if y is not None and (not isinstance(y, int) or y < 0):
                    raise ValueError(f"drop counts must be TNTC or integers >= 0, got {y!r}")

    def all_dilutions(self):
        """All recorded (dilution, drops) pairs, selected one included."""
        return tuple(
            sorted(((self.selected_dilution, self.drops),) + self.other_dilutions)
        )

    @property
    def counted(self):
        """Non-censored counts at the selected dilution."""
        return tuple(y for y in self.drops if y is not None)

    @property
    def n_censored(self):
        """Number of censored (TNTC) drops at the selected dilution."""
        return sum(1 for y in self.drops if y is None)


@dataclass(frozen=True)
class Experiment:
    """One treatment's dilution-series data: a design and K repetitions."""

    design: DilutionDesign
    treatment: str
    reps: tuple

    def __post_init__(self):
        object.__setattr__(self, "reps", tuple(self.reps))
        if len(self.reps) < 1:
            raise ValueError("an experiment needs at least one repetition")
        for rep in self.reps:
            validate_rep(rep, self.design)

    @property
    def K(self):
        return len(self.reps)


def validate_rep(rep, design):
    """Check one repetition against a design; raises DataError on violation."""
    for j, drops in rep.all_dilutions():
        if j >= design.J:
            raise DataError(
                f"rep {rep.rep_id}: dilution {j} out of range (J={design.J})"
            )
        if len(drops) != design.D:
            raise DataError(
                f"rep {rep.rep_id} dilution {j}: expected {design.D} drops, "
                f"got {len(drops)}"
            )
        for y in drops:
            if y is not None and y > design.c:
                raise DataError(
                    f"rep {rep.rep_id} dilution {j}: count {y} exceeds c={design.c} "
                    f"without a {TNTC_TOKEN} mark"
                )


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters: 10^M caps the abundance, b scales the
    exponential prior on the dispersion A."""

    M: float = 10.0
    b: float = 500.0

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("M must be positive")
        if not self.b > 0:
            raise ValueError("b must be positive")

    @property
    def n0_cap(self):
        """Largest admissible abundance, 10^M, as an integer."""
        return int(round(10.0 ** self.M))


_DESIGN_KEYS = {"V0", "V", "u", "alpha", "J", "D", "c", "q", "M", "b", "Sc"}


def load_design(path):
    """Parse a key = value design file.

    Returns (DilutionDesign, Priors).  Required keys: V0, V, u, alpha, J, D,
    c.  Optional: q (default 0.05), M (default 10), b (default 500), Sc.
    alpha0 and alpha_p are always derived from the volumes.
    """
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in _DESIGN_KEYS:
                raise DataError(f"{path}:{lineno}: unknown design key {key!r}")
            if key in values:
                raise DataError(f"{path}:{lineno}: duplicate design key {key!r}")
            try:
                values[key] = float(val.strip())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad number {val.strip()!r}") from exc
    missing = {"V0", "V", "u", "alpha", "J", "D", "c"} - values.keys()
    if missing:
        raise DataError(f"{path}: missing design keys {sorted(missing)}")
    design = DilutionDesign.from_volumes(
        V0=values["V0"],
        V=values["V"],
        u=values["u"],
        alpha=values["alpha"],
        J=int(values["J"]),
        D=int(values["D"]),
        c=int(values["c"]),
        q=values.get("q", 0.05),
        Sc=values.get("Sc"),
    )
    priors = Priors(M=values.get("M", 10.0), b=values.get("b", 500.0))
    return design, priors


def _parse_count(token, path, lineno):
    tok = token.strip()
    if tok == TNTC_TOKEN:
        return None
    try:
        y = int(tok)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: bad count {token!r}") from exc
    if y < 0:
        raise DataError(f"{path}:{lineno}: negative count {y}")
    return y


def _read_count_rows(path):
    """Read a counts CSV into {lab: {rep: {dilution: {drop: count}}}}."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty counts file") from None
        base = ["rep", "dilution", "drop", "count"]
        if header[: len(base)] != base or header not in (base, base + ["lab"]):
            raise DataError(
                f"{path}: expected header 'rep,dilution,drop,count[,lab]', got {header}"
            )
        has_lab = len(header) == 5
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            rep = row[0].strip()
            try:
                dilution = int(row[1])
                drop = int(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad dilution/drop index") from exc
            count = _parse_count(row[3], path, lineno)
            lab = row[4].strip() if has_lab else ""
            cell = table.setdefault(lab, {}).setdefault(rep, {}).setdefault(dilution, {})
            if drop in cell:
                raise DataError(
                    f"{path}:{lineno}: duplicate (rep, dilution, drop) = "
                    f"({rep}, {dilution}, {drop})"
                )
            cell[drop] = count
    if not table:
        raise DataError(f"{path}: no data rows")
    return table


def _build_rep(rep_id, by_dilution, design, path):
    dil_drops = {}
    for j, drops in sorted(by_dilution.items()):
        expected = list(range(1, design.D + 1))
        if sorted(drops) != expected:
            raise DataError(
                f"{path}: rep {rep_id} dilution {j}: need drops {expected}, "
                f"got {sorted(drops)}"
            )
        dil_drops[j] = tuple(drops[i] for i in expected)
    # the selected dilution is the first one where every drop was countable;
    # if every recorded dilution has a TNTC, fall back to the most dilute one
    selected = None
    for j, drops in sorted(dil_drops.items()):
        if all(y is not None for y in drops):
            selected = j
            break
    if selected is None:
        selected = max(dil_drops)
    others = tuple((j, d) for j, d in sorted(dil_drops.items()) if j != selected)
    rep = RepetitionCounts(
        rep_id=rep_id,
        selected_dilution=selected,
        drops=dil_drops[selected],
        other_dilutions=others,
    )
    validate_rep(rep, design)
    return rep


def load_experiment(counts_file, design_file, treatment=None):
    """Load and validate a single-lab experiment from a counts CSV and a
    design file.  The counts file must not carry more than one lab."""
    design, _ = load_design(design_file)
    table = _read_count_rows(counts_file)
    if len(table) > 1:
        raise DataError(
            f"{counts_file}: multiple labs present {sorted(table)}; "
            "use load_lab_experiments"
        )
    lab = next(iter(table))
    if treatment is None:
        treatment = str(counts_file)
    reps = tuple(
        _build_rep(rep_id, dils, design, counts_file)
        for rep_id, dils in table[lab].items()
    )
    return Experiment(design=design, treatment=treatment, reps=reps)


def load_lab_experiments(counts_file, design_file, treatment=None):
    """Load a multi-lab counts file; returns an ordered {lab: Experiment}."""
    design, _ = load_design(design_file)
    table = _read_count_rows(counts_file)
    if treatment is None:
        treatment = str(counts_file)
    out = {}
    for lab, reps_tab in table.items():
        reps = tuple(
            _build_rep(rep_id, dils, design, counts_file)
            for rep_id, dils in reps_tab.items()
        )
        out[lab] = Experiment(design=design, treatment=f"{treatment}", reps=reps)
    return out


def save_experiment(experiment, counts_file, design_file=None, priors=None, lab=None):
    """Write an experiment back to the CSV counts format (and optionally the
    design file).  Together with load_experiment this round-trips the data."""
    with open(counts_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["rep", "dilution", "drop", "count"]
        if lab is not None:
            header.append("lab")
        writer.writerow(header)
        for rep in experiment.reps:
            for j, drops in rep.all_dilutions():
                for i, y in enumerate(drops, start=1):
                    row = [rep.rep_id, j, i, TNTC_TOKEN if y is None else y]
                    if lab is not None:
                        row.append(lab)
                    writer.writerow(row)
    if design_file is not None:
        save_design(experiment.design, design_file, priors=priors)


def save_design(design, path, priors=None):
    """Write a design (and optional priors) as a key = value file."""
    if design.V0 is not None:
        v0, v, u = design.V0, design.V, design.u
    else:
        # synthesize consistent volumes from the ratios
        v = 10.0
        v0 = design.alpha0 * v
        u = v / design.alpha_p
    lines = [
        f"V0 = {v0:.17g}",
        f"V = {v:.17g}",
        f"u = {u:.17g}",
        f"alpha = {design.alpha:.17g}",
        f"J = {design.J}",
        f"D = {design.D}",
        f"c = {design.c}",
        f"q = {design.q:.17g}",
    ]
    if design.Sc is not None:
        lines.append(f"Sc = {design.Sc:.17g}")
    if priors is not None:
        lines.append(f"M = {priors.M:.17g}")
        lines.append(f"b = {priors.b:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def crude_abundance(rep, design):
    """Plain mean estimator: mean drop count times alpha0 * alpha^j * alpha_p.

    Only non-censored drops at the selected dilution enter the mean.
    """
    counted = rep.counted
    if not counted:
        raise DataError(f"rep {rep.rep_id}: every drop is censored")
    scale = design.alpha0 * design.alpha ** rep.selected_dilution * design.alpha_p
    return (sum(counted) / len(counted)) * scale


def log_density_shift(log_abundance, Sc):
    """Convert a log10 abundance to a log10 density per specimen unit."""
    if not Sc > 0:
        raise ValueError("Sc must be positive")
    return log_abundance - math.log10(Sc)
