"""Forced-choice experiment sessions and their analysis.

This module owns everything between "a folder of exported candidate
stimuli" and "a statistics table": building randomized trial sequences,
recording left/right/center responses exactly once, persisting an
append-only event log that can rebuild every session from scratch, and
summarizing responses into per-method proportions plus Thurstone Case V
scale separations with confidence intervals.

The flow is deliberately plain:

    candidates --build_session--> Session (shuffled, side-balanced)
    Session + observer clicks --record_response--> answered Session
    answered Sessions --summarize--> SummaryTable
    SummaryTable --thurstone_table--> z-scores with 95% intervals

Side randomization never re-renders a stimulus.  A trial marked
``mirrored`` is shown as the horizontal mirror of the stored image,
which flips which side carries the predicted-lighter target while
preserving every adjacency statistic of the inducer.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import stimulus as _stimulus_io

SIDES = ("left", "right")
CHOICES = ("left", "right", "center")
UNANSWERED = "unanswered"

# Event-log record types (line-delimited JSON, append only).
EVENT_SESSION = "session_created"
EVENT_RESPONSE = "response_recorded"

_WILSON_Z = float(norm.ppf(0.975))  # two-sided 95%


def _flip(side):
    return "left" if side == "right" else "right"


# ----------------------------------------------------------------------
# Domain records
# ----------------------------------------------------------------------

def lighter_side_from_pq(sign, pq_value):
    """Which side a lightness-style quantifier predicts to look lighter.

    Under the ``right_minus_left`` convention a positive value means the
    right-hand target evoked the larger response, so the right side is
    the predicted-lighter one; ``left_minus_right`` flips that.  A value
    of exactly zero carries no prediction and is rejected.
    """
    if sign not in ("right_minus_left", "left_minus_right"):
        raise ValueError(f"unknown sign convention {sign!r}")
    if pq_value == 0:
        raise ValueError("pq_value of exactly 0 predicts no lighter side")
    positive_means = "right" if sign == "right_minus_left" else "left"
    return positive_means if pq_value > 0 else _flip(positive_means)

@dataclass(frozen=True)
class CandidateStimulus:
    """One exported stimulus entering the experiment pool.

    ``lighter_side`` is the side the visual-task solver predicts to look
    lighter in the image as stored (before any mirroring).  ``image`` is
    optional here so sequence-building can be tested without pixels; the
    serving layer requires it.
    """

    stimulus_id: str
    method_tag: str
    lighter_side: str
    image: np.ndarray | None = None

    def __post_init__(self):
        if not self.stimulus_id:
            raise ValueError("stimulus_id must be a non-empty string")
        if not self.method_tag:
            raise ValueError("method_tag must be a non-empty string")
        if self.lighter_side not in SIDES:
            raise ValueError(
                f"lighter_side must be one of {SIDES}, got {self.lighter_side!r}"
            )


@dataclass(frozen=True)
class TrialRecord:
    """A single presentation slot in a session.

    ``expected_side`` is where the predicted-lighter target sits as the
    observer will see it, i.e. after the mirror flag has been applied.
    ``choice`` starts as ``"unanswered"`` and may be set exactly once.
    """

    stimulus_id: str
    method_tag: str
    expected_side: str
    mirrored: bool
    choice: str = UNANSWERED
    response_ms: float | None = None

    @property
    def answered(self):
        return self.choice != UNANSWERED


@dataclass
class Session:
    """An ordered, immutable-once-built sequence of trials.

    The trial order and side assignment are fixed at creation; only the
    ``choice``/``response_ms`` of each trial may change afterwards, and
    each at most once (enforced by :func:`record_response`).
    """

    session_id: str
    observer_id: str
    seed: int
    trials: list = field(default_factory=list)

    @property
    def answered_count(self):
        return sum(1 for t in self.trials if t.answered)

    @property
    def complete(self):
        return self.answered_count == len(self.trials)

    def first_unanswered(self):
        """Index of the first open trial, or None when complete."""
        for i, t in enumerate(self.trials):
            if not t.answered:
                return i
        return None


def load_candidate_pool(export_dir, method_tag):
    """Read an exported candidate directory into experiment stimuli.

    Expects the manifest written at export time next to its PNGs.  Each
    file's digest is re-checked so a silently corrupted or regenerated
    image cannot slip into an experiment; the predicted-lighter side is
    derived from the recorded quantifier value and sign convention.
    """
    manifest_path = os.path.join(export_dir, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    pool = []
    for entry in manifest["candidates"]:
        path = os.path.join(export_dir, entry["filename"])
        with open(path, "rb") as fh:
            data = fh.read()
        digest = hashlib.sha256(data).hexdigest()
        if digest != entry["sha256"]:
            raise ValueError(
                f"{path}: sha256 mismatch against manifest "
                f"({digest[:12]}... != {entry['sha256'][:12]}...)"
            )
        image = _stimulus_io.load_image_png(path)
        stem = os.path.splitext(entry["filename"])[0]
        pool.append(
            CandidateStimulus(
                stimulus_id=f"{method_tag}-{stem}",
                method_tag=method_tag,
                lighter_side=lighter_side_from_pq(entry["sign"],
                                                  entry["pq_value"]),
                image=image,
            )
        )
    if not pool:
        raise ValueError(f"{manifest_path} lists no candidates")
    return pool


def build_session(candidates, observer_id="anonymous", seed=0, session_id=None):
    """Assemble a randomized session from a pool of candidate stimuli.

    Every candidate appears exactly once.  The presentation order is a
    seeded permutation, and the expected-lighter side is balanced to
    within one trial across the whole session: each trial draws a target
    side from a shuffled half-left/half-right deck, and the stimulus is
    flagged for horizontal mirroring whenever its stored lighter side
    disagrees with the drawn one.  With a homogeneous pool (every
    candidate lighter on the same side, the usual case straight out of
    fine-tuning) this mirrors exactly a random balanced half.

    Same candidates + same seed => byte-identical session, including the
    derived session_id.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("cannot build a session from an empty candidate set")
    ids = [c.stimulus_id for c in candidates]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate stimulus ids in candidate pool: {dupes}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))

    n = len(candidates)
    deck = ["right"] * (n // 2) + ["left"] * (n - n // 2)
    deck = [deck[i] for i in rng.permutation(n)]

    trials = []
    for idx, side in zip(order, deck):
        cand = candidates[int(idx)]
        trials.append(
            TrialRecord(
                stimulus_id=cand.stimulus_id,
                method_tag=cand.method_tag,
                expected_side=side,
                mirrored=(cand.lighter_side != side),
            )
        )

    if session_id is None:
        digest = hashlib.sha256()
        digest.update(observer_id.encode("utf-8"))
        digest.update(str(seed).encode("ascii"))
        for t in trials:
            digest.update(t.stimulus_id.encode("utf-8"))
        session_id = f"sess-{digest.hexdigest()[:12]}"

    return Session(
        session_id=session_id,
        observer_id=observer_id,
        seed=int(seed),
        trials=trials,
    )


def record_response(session, trial_index, choice, response_ms=None):
    """Store one observer choice; a trial accepts exactly one.

    Returns the session (trials list updated in place with a replaced
    frozen record).  Raises on unknown trial, on a choice outside
    left/right/center, and on any second response to the same trial.
    """
    if not isinstance(trial_index, int) or isinstance(trial_index, bool):
        raise TypeError("trial_index must be an integer")
    if not 0 <= trial_index < len(session.trials):
        raise IndexError(
            f"unknown trial {trial_index} (session has {len(session.trials)})"
        )
    if choice not in CHOICES:
        raise ValueError(f"choice must be one of {CHOICES}, got {choice!r}")
    if response_ms is not None:
        response_ms = float(response_ms)
        if not np.isfinite(response_ms) or response_ms < 0:
            raise ValueError("response_ms must be a finite non-negative number")

    trial = session.trials[trial_index]
    if trial.answered:
        raise ValueError(
            f"trial {trial_index} of session {session.session_id} "
            f"already answered ({trial.choice!r})"
        )
    session.trials[trial_index] = dataclasses.replace(
        trial, choice=choice, response_ms=response_ms
    )
    return session


# ----------------------------------------------------------------------
# Summary table
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GroupSummary:
    """Response proportions for one group of trials."""

    n_trials: int
    n_correct: int
    n_opposite: int
    n_center: int

    def __post_init__(self):
        if self.n_correct + self.n_opposite + self.n_center != self.n_trials:
            raise ValueError("group counts do not add up to the trial count")

    @property
    def correct(self):
        return self.n_correct / self.n_trials

    @property
    def opposite(self):
        return self.n_opposite / self.n_trials

    @property
    def none(self):
        return self.n_center / self.n_trials

    def as_dict(self):
        return {
            "n_trials": self.n_trials,
            "correct": self.correct,
            "opposite": self.opposite,
            "none": self.none,
        }


@dataclass(frozen=True)
class SummaryTable:
    """Proportions of correct / opposite / no-difference choices.

    ``groups`` always holds the key ``"all"`` plus one key per method
    tag present in the sessions.
    """

    groups: dict

    def as_dict(self):
        return {name: g.as_dict() for name, g in sorted(self.groups.items())}


def summarize(sessions):
    """Aggregate answered sessions into a SummaryTable.

    Accepts a single session or an iterable.  A choice matching the
    trial's expected side counts as correct, the other side as opposite,
    and center as none.  Any unanswered trial is an error: the table is
    only meaningful over complete data.
    """
    if isinstance(sessions, Session):
        sessions = [sessions]
    sessions = list(sessions)
    if not sessions:
        raise ValueError("no sessions to summarize")

    open_trials = [
        (s.session_id, i)
        for s in sessions
        for i, t in enumerate(s.trials)
        if not t.answered
    ]
    if open_trials:
        shown = ", ".join(f"{sid}[{i}]" for sid, i in open_trials[:5])
        raise ValueError(
            f"{len(open_trials)} unanswered trial(s) present (e.g. {shown})"
        )

    counts = {}  # tag -> [correct, opposite, center]

    def bump(tag, slot):
        counts.setdefault(tag, [0, 0, 0])[slot] += 1

    for s in sessions:
        for t in s.trials:
            if t.choice == t.expected_side:
                slot = 0
            elif t.choice == "center":
                slot = 2
            else:
                slot = 1
            bump("all", slot)
            bump(t.method_tag, slot)

    groups = {
        tag: GroupSummary(
            n_trials=sum(c), n_correct=c[0], n_opposite=c[1], n_center=c[2]
        )
        for tag, c in counts.items()
    }
    return SummaryTable(groups=groups)


# ----------------------------------------------------------------------
# Thurstone Case V
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ThurstoneEstimate:
    """Scale separation for one group under Thurstone's Case V.

    ``z`` is the inverse standard-normal CDF of the proportion of
    observers who reported the generated illusion (choice equal to the
    expected side; the opposite side and "no difference" both count as
    not seeing it).  When the trial count ``n`` is known, ``p_low`` /
    ``p_high`` hold the 95% Wilson score interval on the proportion and
    ``z_low`` / ``z_high`` its image under the same inverse CDF.
    """

    proportion: float
    z: float
    n: int | None = None
    p_low: float | None = None
    p_high: float | None = None
    z_low: float | None = None
    z_high: float | None = None

    def as_dict(self):
        return dataclasses.asdict(self)


def thurstone_case_v(proportion, n=None):
    """Map a seen-the-illusion proportion to a normal scale separation.

    The proportion must lie strictly inside (0, 1).  Exact 0 or 1 is
    only admissible when ``n`` is given, in which case the conventional
    1/(2N) boundary correction is applied before inversion; without a
    trial count the inverse CDF would be infinite and the call raises.

    With ``n`` the estimate also carries a 95% Wilson score interval on
    the proportion, mapped through the same inverse CDF (the inverse is
    strictly increasing, so the interval endpoints map directly).
    """
    p = float(proportion)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion must lie in [0, 1], got {p}")
    if n is not None:
        n = int(n)
        if n <= 0:
            raise ValueError("n must be a positive trial count")
    if p == 0.0 or p == 1.0:
        if n is None:
            raise ValueError(
                "proportion of exactly 0 or 1 needs a trial count for the "
                "1/(2N) boundary correction"
            )
        p = 1.0 / (2.0 * n) if p == 0.0 else 1.0 - 1.0 / (2.0 * n)

    z = float(norm.ppf(p))
    if n is None:
        return ThurstoneEstimate(proportion=p, z=z)

    # Wilson score interval at 95% on the (corrected) proportion.
    zc = _WILSON_Z
    denom = 1.0 + zc * zc / n
    center = (p + zc * zc / (2.0 * n)) / denom
    half = (zc / denom) * np.sqrt(p * (1.0 - p) / n + zc * zc / (4.0 * n * n))
    p_low = max(center - half, 1.0 / (2.0 * n))
    p_high = min(center + half, 1.0 - 1.0 / (2.0 * n))
    return ThurstoneEstimate(
        proportion=p,
        z=z,
        n=n,
        p_low=float(p_low),
        p_high=float(p_high),
        z_low=float(norm.ppf(p_low)),
        z_high=float(norm.ppf(p_high)),
    )


def thurstone_table(summary):
    """Thurstone estimates for every group of a SummaryTable."""
    return {
        tag: thurstone_case_v(group.correct, n=group.n_trials)
        for tag, group in summary.groups.items()
    }


# ----------------------------------------------------------------------
# Append-only event log
# ----------------------------------------------------------------------

def append_event(path, record):
    """Append one JSON record to the event log, flushed before returning.

    The log is the durable source of truth: callers must append the
    event before acknowledging the action it describes.
    """
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def log_session_created(path, session):
    append_event(
        path,
        {
            "event": EVENT_SESSION,
            "session_id": session.session_id,
            "observer_id": session.observer_id,
            "seed": session.seed,
            "trials": [
                {
                    "stimulus_id": t.stimulus_id,
                    "method_tag": t.method_tag,
                    "expected_side": t.expected_side,
                    "mirrored": t.mirrored,
                }
                for t in session.trials
            ],
        },
    )


def log_response(path, session_id, trial_index, choice, response_ms=None):
    append_event(
        path,
        {
            "event": EVENT_RESPONSE,
            "session_id": session_id,
            "trial_index": int(trial_index),
            "choice": choice,
            "response_ms": response_ms,
        },
    )


def replay_events(path):
    """Rebuild all sessions from an event log.

    Returns ``{session_id: Session}``.  Responses are re-applied through
    :func:`record_response`, so a corrupted log (double responses,
    unknown trials, bad choices) fails loudly instead of producing a
    silently wrong table.
    """
    sessions = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable event") from exc
            kind = record.get("event")
            if kind == EVENT_SESSION:
                sid = record["session_id"]
                if sid in sessions:
                    raise ValueError(f"{path}:{lineno}: duplicate session {sid}")
                sessions[sid] = Session(
                    session_id=sid,
                    observer_id=record["observer_id"],
                    seed=int(record["seed"]),
                    trials=[
                        TrialRecord(
                            stimulus_id=t["stimulus_id"],
                            method_tag=t["method_tag"],
                            expected_side=t["expected_side"],
                            mirrored=bool(t["mirrored"]),
                        )
                        for t in record["trials"]
                    ],
                )
            elif kind == EVENT_RESPONSE:
                sid = record["session_id"]
                if sid not in sessions:
                    raise ValueError(
                        f"{path}:{lineno}: response for unknown session {sid}"
                    )
                record_response(
                    sessions[sid],
                    int(record["trial_index"]),
                    record["choice"],
                    record.get("response_ms"),
                )
            else:
                raise ValueError(f"{path}:{lineno}: unknown event kind {kind!r}")
    return sessions
