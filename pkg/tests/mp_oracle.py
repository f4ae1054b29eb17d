"""High-precision reference for the TSA loss on raw features.

Written independently of the package (plain mpmath loops) so it can serve
as a finite-difference oracle where float64 round-off would swamp tiny
gradients, e.g. saturated softmax rows at small temperature.
"""

import mpmath as mp

DPS = 40


def _unit(rows):
    out = []
    for r in rows:
        n = mp.sqrt(mp.fsum(v * v for v in r))
        out.append([v / n for v in r])
    return out


def _log_probs(unit, frames, hw, tau):
    # [query][frame][position]
    out = []
    for q in unit:
        per_frame = []
        for f in range(frames):
            logits = [mp.fdot(q, unit[f * hw + s]) / tau for s in range(hw)]
            m = max(logits)
            lse = m + mp.log(mp.fsum(mp.exp(v - m) for v in logits))
            per_frame.append([v - lse for v in logits])
        out.append(per_frame)
    return out


def tsa_loss_mp(teacher_raw, student_raw, frames, hw, tau):
    """Mean over queries and frames of KL(teacher || student)."""
    tau = mp.mpf(tau)
    lt = _log_probs(_unit(teacher_raw), frames, hw, tau)
    ls = _log_probs(_unit(student_raw), frames, hw, tau)
    total = mp.fsum(
        mp.exp(a) * (a - b)
        for qt, qs in zip(lt, ls)
        for ft, fs in zip(qt, qs)
        for a, b in zip(ft, fs)
    )
    return total / (len(lt) * frames)


def feature_gradient_mp(teacher_raw, student_raw, frames, hw, tau, step="1e-15"):
    """Central differences of :func:`tsa_loss_mp` w.r.t. every student entry."""
    with mp.workdps(DPS):
        t = [[mp.mpf(float(v)) for v in r] for r in teacher_raw]
        s = [[mp.mpf(float(v)) for v in r] for r in student_raw]
        h = mp.mpf(step)
        grad = []
        for i, r in enumerate(s):
            row = []
            for j, v in enumerate(r):
                r[j] = v + h
                up = tsa_loss_mp(t, s, frames, hw, tau)
                r[j] = v - h
                down = tsa_loss_mp(t, s, frames, hw, tau)
                r[j] = v
                row.append(float((up - down) / (2 * h)))
            grad.append(row)
    return grad
