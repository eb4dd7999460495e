"""Agent-supervisor protocol bookkeeping.

A step in which any agent's predicate fires produces exactly one broadcast:
simultaneous requests collapse into a single event and every agent receives
the same snapshot, so the held coupling-gradient components always share one
source.  Message counts depend on how the supervisor obtains its
information: with sensing it already has it (uplink = requests only), with
computation it must first gather all n agent states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dynamics import SupervisorSnapshot
from .problem import NetworkProblem

# 17 significant digits round-trips a float64 exactly.
def f17(v: float) -> str:
    return format(float(v), ".17g")


class CoordinationMode(Enum):
    SENSING = "sensing"
    COMPUTATION = "computation"


@dataclass(frozen=True)
class EventRecord:
    """One broadcast: when, who asked, what it cost, and what was sent."""

    time: float
    index: int
    initiators: tuple
    messages_up: int
    messages_down: int
    snapshot: SupervisorSnapshot


def process_step(problem: NetworkProblem, t: float, x, fired,
                 mode: CoordinationMode, snapshot: SupervisorSnapshot,
                 force: bool = False):
    """Advance the protocol by one step.

    Returns (snapshot, record): a fresh snapshot plus its EventRecord when
    any predicate fired (or ``force`` is set, e.g. after a disturbance),
    otherwise the unchanged snapshot and None.
    """
    initiators = () if fired is None else tuple(int(i) for i in np.flatnonzero(fired))
    if not initiators and not force:
        return snapshot, None
    n = problem.n
    up = len(initiators) + (n if mode is CoordinationMode.COMPUTATION else 0)
    new_snap = SupervisorSnapshot.take(problem, x, t, snapshot.index + 1)
    record = EventRecord(time=float(t), index=new_snap.index, initiators=initiators,
                         messages_up=up, messages_down=n, snapshot=new_snap)
    return new_snap, record


def initial_record(problem: NetworkProblem, x, mode: CoordinationMode) -> EventRecord:
    """The t=0 broadcast that seeds every agent's held gradient."""
    snap = SupervisorSnapshot.take(problem, x, 0.0, 0)
    n = problem.n
    up = n if mode is CoordinationMode.COMPUTATION else 0
    return EventRecord(time=0.0, index=0, initiators=(), messages_up=up,
                       messages_down=n, snapshot=snap)


@dataclass(frozen=True)
class MessageStats:
    """Run-level totals; inter-event statistics are None with < 2 events."""

    total_events: int
    messages_up: int
    messages_down: int
    per_agent_initiations: tuple
    min_interevent: float | None
    mean_interevent: float | None
    std_interevent: float | None
    horizon: float


def summarize(records, horizon: float) -> MessageStats:
    """Aggregate an ordered event log into MessageStats."""
    records = list(records)
    if records:
        times = [r.time for r in records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event records must be strictly increasing in time")
        n = records[0].snapshot.held_gradient.shape[0]
        per_agent = [0] * n
        for r in records:
            for i in r.initiators:
                per_agent[i] += 1
        gaps = np.diff(times)
    else:
        per_agent = []
        gaps = np.array([])
    if gaps.size >= 1:
        gmin, gmean, gstd = float(np.min(gaps)), float(np.mean(gaps)), float(np.std(gaps))
    else:
        gmin = gmean = gstd = None
    return MessageStats(
        total_events=len(records),
        messages_up=sum(r.messages_up for r in records),
        messages_down=sum(r.messages_down for r in records),
        per_agent_initiations=tuple(per_agent),
        min_interevent=gmin, mean_interevent=gmean, std_interevent=gstd,
        horizon=float(horizon))


def stats_to_dict(stats: MessageStats) -> dict:
    return {
        "total_events": stats.total_events,
        "messages_up": stats.messages_up,
        "messages_down": stats.messages_down,
        "per_agent_initiations": list(stats.per_agent_initiations),
        "min_interevent": stats.min_interevent,
        "mean_interevent": stats.mean_interevent,
        "std_interevent": stats.std_interevent,
        "horizon": stats.horizon,
    }


# ---------------------------------------------------------------------------
# event log export
# ---------------------------------------------------------------------------

def write_events_csv(records, path) -> None:
    """Columns: k, t, initiators (semicolon-joined), msgs_up, msgs_down."""
    with open(path, "w", newline="") as fh:
        fh.write("k,t,initiators,msgs_up,msgs_down\n")
        for r in records:
            who = ";".join(str(i) for i in r.initiators)
            fh.write(f"{r.index},{f17(r.time)},{who},{r.messages_up},{r.messages_down}\n")


def events_to_json(records) -> list:
    out = []
    for r in records:
        out.append({
            "k": r.index,
            "t": r.time,
            "initiators": list(r.initiators),
            "msgs_up": r.messages_up,
            "msgs_down": r.messages_down,
            "snapshot": {
                "anchor_state": r.snapshot.anchor_state.tolist(),
                "held_gradient": r.snapshot.held_gradient.tolist(),
                "time": r.snapshot.time,
                "index": r.snapshot.index,
            },
        })
    return out


def write_events_json(records, path) -> None:
    with open(path, "w") as fh:
        json.dump(events_to_json(records), fh, indent=2, sort_keys=True)
        fh.write("\n")
