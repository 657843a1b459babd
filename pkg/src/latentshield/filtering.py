"""Runtime safety monitor and switching law.

The filter peeks one step ahead on a branched session, evaluates the learned
value of the successor latent under the proposed task action, and passes the
action through only if that value strictly exceeds delta + runtime_margin.
Otherwise the fallback policy acts from the current state. Ties intervene:
conservative is the safety-preserving default at the boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import safety_rl
from .conformal import Threshold
from .latent import LatentSession

log = logging.getLogger(__name__)


@dataclass
class FilterDecision:
    executed: float          # rad/s actually applied
    intervened: bool
    value: float             # monitored next-state value under the task action
    threshold: float         # delta + runtime_margin actually compared against
    constraint_id: str = ""


def check_provenance(fn: safety_rl.FilterNets, t: Threshold) -> None:
    if fn.projector_checksum != t.projector_checksum:
        raise ValueError(
            "filter nets and threshold were calibrated against different "
            f"projectors ({fn.projector_checksum[:12]}... vs {t.projector_checksum[:12]}...)")


def monitor(session: LatentSession, fn: safety_rl.FilterNets, z_c: np.ndarray,
            projector=None) -> float:
    """Current-state value V(z; z_c), for display; does not step the session."""
    return safety_rl.value(fn, session.current_latent(), z_c, projector)


def decide(session: LatentSession, fn: safety_rl.FilterNets, z_c: np.ndarray,
           t: Threshold, a_task: float, projector=None,
           constraint_id: str = "") -> FilterDecision:
    """Pure switching decision; peeks via a branch, never mutates the session."""
    check_provenance(fn, t)
    a_max = session.params.a_max
    if abs(a_task) > a_max + 1e-12:
        raise ValueError(f"task action {a_task} outside [-{a_max}, {a_max}]")

    if t.is_sentinel:
        log.warning("threshold is the +inf sentinel; filter degenerates to always-fallback")
        v_next = -np.inf
    else:
        peek = session.branch()
        z_next = peek.step(a_task)
        v_next = safety_rl.value(fn, z_next, z_c, projector)

    threshold = t.effective
    if v_next > threshold:
        return FilterDecision(executed=a_task, intervened=False, value=v_next,
                              threshold=threshold, constraint_id=constraint_id)
    a_fb = safety_rl.fallback_action(fn, session.current_latent(), z_c, projector)
    return FilterDecision(executed=a_fb * a_max, intervened=True, value=v_next,
                          threshold=threshold, constraint_id=constraint_id)


def filter_action(session: LatentSession, fn: safety_rl.FilterNets, z_c: np.ndarray,
                  t: Threshold, a_task: float, projector=None,
                  constraint_id: str = "") -> FilterDecision:
    """Decide, then advance the live session with the executed action."""
    decision = decide(session, fn, z_c, t, a_task, projector, constraint_id)
    session.step(decision.executed)
    return decision
