"""Hot inner loops.

Every kernel here is decorated with :func:`varcast._jit.njit`, so it runs as
compiled code when numba is enabled and as ordinary Python otherwise.  The
simulator kernel draws all randomness through scalar ``rng.random()`` calls on
a ``numpy.random.Generator``; numba shares the generator's bit stream, so the
compiled and interpreted paths produce bit-identical runs.

The Monte Carlo and bootstrap kernels have a vectorized numpy twin used when
numba is disabled (interpreting those loops would be needlessly slow).
"""
import math

import numpy as np

from ._jit import USE_NUMBA, njit

# layout of the float parameter vector handed to ``sim_advance``
P_BETA = 0
P_AMPLITUDE = 1
P_BASELINE = 2
P_OFFSET = 3
P_NU = 4
P_DEATH = 5
P_LAMBDA_DEL = 6
P_LAMBDA_AG = 7
P_MEAN_AG = 8
P_GAMMA_SHAPE = 9
P_THRESHOLD = 10
P_SMITH = 11
P_HOMOLOGOUS = 12
P_MUT_COST = 13
P_BENEFICIAL = 14
P_EXTERNAL = 15
N_PAR = 16

# counters shared between calls
C_N_INF = 0
C_N_TYPES = 1
C_EXTINCT_DAY = 2
C_LAST_TYPE = 3
N_CNT = 4

STATUS_RUNNING = 0
STATUS_EXTINCT = 1

MAX_ANTIGENIC_PER_TRANSMISSION = 8


@njit(cache=True)
def poisson_draw(rng, lam):
    """Poisson variate by sequential inversion (split into chunks of 50)."""
    k = 0
    while lam > 50.0:
        k += poisson_draw(rng, 50.0)
        lam -= 50.0
    if lam <= 0.0:
        return k
    u = rng.random()
    p = math.exp(-lam)
    cdf = p
    j = 0
    while u > cdf:
        j += 1
        p *= lam / j
        cdf += p
        if p < 1e-300 and j > lam:
            break
    return k + j


@njit(cache=True)
def binomial_draw(rng, n, p):
    """Binomial variate by inversion; intended for small ``n * p``."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    if n * p > 50.0:
        # inversion from zero underflows; the Poisson limit is adequate here
        return min(n, poisson_draw(rng, n * p))
    q = 1.0 - p
    u = rng.random()
    pk = math.exp(n * math.log1p(-p))
    cdf = pk
    k = 0
    while u > cdf and k < n:
        pk *= (n - k) / (k + 1.0) * p / q
        k += 1
        cdf += pk
    return k


@njit(cache=True)
def gamma_int_shape(rng, shape, mean):
    """Gamma(shape, mean/shape) for integer ``shape`` as a sum of exponentials."""
    scale = mean / shape
    acc = 0.0
    for _ in range(int(shape)):
        acc -= math.log(1.0 - rng.random())
    return acc * scale


@njit(cache=True)
def _grow_types(types_pos, types_parent, weekly):
    cap = types_pos.shape[0] * 2
    new_pos = np.zeros(cap)
    new_parent = np.full(cap, -1, dtype=np.int64)
    new_weekly = np.zeros((weekly.shape[0], cap))
    new_pos[: types_pos.shape[0]] = types_pos
    new_parent[: types_parent.shape[0]] = types_parent
    new_weekly[:, : weekly.shape[1]] = weekly
    return new_pos, new_parent, new_weekly


@njit(cache=True)
def _risk(par, hist, hist_n, host, pos, load):
    hom = par[P_HOMOLOGOUS]
    smith = par[P_SMITH]
    k = min(hist_n[host], hist.shape[1])
    immunity = 0.0
    for j in range(k):
        imm = hom - smith * abs(pos - hist[host, j])
        if imm > immunity:
            immunity = imm
    if immunity > hom:
        immunity = hom
    return (1.0 - immunity) * (1.0 - par[P_MUT_COST]) ** load


@njit(cache=True)
def _challenge(rng, par, src_type, src_load, tgt, day, week, record,
               inf_type, inf_load, hist, hist_n, inf_list, inf_pos, cnt,
               types_pos, types_parent, weekly):
    """Challenge host ``tgt`` with a strain; returns True on infection.

    Caller guarantees room for MAX_ANTIGENIC_PER_TRANSMISSION new types.
    """
    if inf_type[tgt] >= 0:
        return False
    if rng.random() >= _risk(par, hist, hist_n, tgt, types_pos[src_type], src_load):
        return False
    load = src_load + poisson_draw(rng, par[P_LAMBDA_DEL]) - poisson_draw(rng, par[P_BENEFICIAL])
    if load < 0:
        load = 0
    t = src_type
    n_ag = min(poisson_draw(rng, par[P_LAMBDA_AG]), MAX_ANTIGENIC_PER_TRANSMISSION)
    for _ in range(n_ag):
        size = gamma_int_shape(rng, par[P_GAMMA_SHAPE], par[P_MEAN_AG])
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if size < par[P_THRESHOLD]:
            continue
        nt = cnt[C_N_TYPES]
        types_pos[nt] = types_pos[t] + sign * size
        types_parent[nt] = t
        cnt[C_N_TYPES] = nt + 1
        t = nt
    inf_type[tgt] = t
    inf_load[tgt] = load
    cnt[C_LAST_TYPE] = t
    n = cnt[C_N_INF]
    inf_list[n] = tgt
    inf_pos[tgt] = n
    cnt[C_N_INF] = n + 1
    if record:
        weekly[week, t] += 1.0
    return True


@njit(cache=True)
def _remove_infected(host, inf_type, inf_list, inf_pos, cnt):
    i = inf_pos[host]
    last = cnt[C_N_INF] - 1
    moved = inf_list[last]
    inf_list[i] = moved
    inf_pos[moved] = i
    inf_pos[host] = -1
    inf_type[host] = -1
    cnt[C_N_INF] = last


@njit(cache=True)
def sim_advance(rng, par, n_hosts, day0, day1, print_step,
                inf_type, inf_load, hist, hist_n, inf_list, inf_pos, cnt,
                types_pos, types_parent, weekly, pop_trace):
    """Advance the host population from ``day0`` up to (excluding) ``day1``.

    Daily order: deaths (replaced by naive newborns), transmission from hosts
    infected at the start of the day, external migration, recoveries.  Without
    an external force of infection the run stops (extinct) as soon as no host
    is infected; with one, imports can restart transmission.  New
    infections are tallied into ``weekly[day // print_step, type]``.

    Returns ``(status, types_pos, types_parent, weekly)``; the type arrays are
    reallocated when the antigenic type table fills up.
    """
    n_weeks = weekly.shape[0]
    p_death = 1.0 - math.exp(-par[P_DEATH])
    p_rec = 1.0 - math.exp(-par[P_NU])
    k_hist = hist.shape[1]
    external = par[P_EXTERNAL] > 0.0
    status = STATUS_RUNNING
    for day in range(day0, day1):
        week = day // print_step
        record = week < n_weeks
        season = par[P_BASELINE] + par[P_AMPLITUDE] * math.cos(2.0 * math.pi * day / 365.0 + par[P_OFFSET])
        contact_rate = par[P_BETA] * season
        if contact_rate < 0.0:
            contact_rate = 0.0

        n_dead = binomial_draw(rng, n_hosts, p_death)
        for _ in range(n_dead):
            h = int(rng.random() * n_hosts)
            if inf_type[h] >= 0:
                _remove_infected(h, inf_type, inf_list, inf_pos, cnt)
            inf_load[h] = 0
            hist_n[h] = 0

        n_start = cnt[C_N_INF]
        if n_start == 0 and not external:
            status = STATUS_EXTINCT
            cnt[C_EXTINCT_DAY] = day
            break

        for i in range(n_start):
            src = inf_list[i]
            src_type = inf_type[src]
            src_load = inf_load[src]
            n_contacts = poisson_draw(rng, contact_rate)
            for _ in range(n_contacts):
                if cnt[C_N_TYPES] + MAX_ANTIGENIC_PER_TRANSMISSION >= types_pos.shape[0]:
                    types_pos, types_parent, weekly = _grow_types(types_pos, types_parent, weekly)
                tgt = int(rng.random() * n_hosts)
                _challenge(rng, par, src_type, src_load, tgt, day, week, record,
                           inf_type, inf_load, hist, hist_n, inf_list, inf_pos, cnt,
                           types_pos, types_parent, weekly)

        n_ext = poisson_draw(rng, contact_rate * par[P_EXTERNAL])
        for _ in range(n_ext):
            if cnt[C_N_TYPES] + MAX_ANTIGENIC_PER_TRANSMISSION >= types_pos.shape[0]:
                types_pos, types_parent, weekly = _grow_types(types_pos, types_parent, weekly)
            # imports copy a circulating strain, or the last one seen locally
            if cnt[C_N_INF] > 0:
                src = inf_list[int(rng.random() * cnt[C_N_INF])]
                imp_type = inf_type[src]
                imp_load = inf_load[src]
            else:
                imp_type = cnt[C_LAST_TYPE]
                imp_load = 0
            tgt = int(rng.random() * n_hosts)
            _challenge(rng, par, imp_type, imp_load, tgt, day, week, record,
                       inf_type, inf_load, hist, hist_n, inf_list, inf_pos, cnt,
                       types_pos, types_parent, weekly)

        # backwards so that swap-removal never revisits a processed slot
        for i in range(n_start - 1, -1, -1):
            h = inf_list[i]
            if rng.random() < p_rec:
                slot = hist_n[h] % k_hist
                hist[h, slot] = types_pos[inf_type[h]]
                hist_n[h] += 1
                _remove_infected(h, inf_type, inf_list, inf_pos, cnt)

        if pop_trace.shape[0] > 0:
            n_inf = 0
            n_free = 0
            for h in range(n_hosts):
                if inf_type[h] >= 0:
                    n_inf += 1
                else:
                    n_free += 1
            pop_trace[day, 0] = n_free
            pop_trace[day, 1] = n_inf

        if cnt[C_N_INF] == 0 and not external:
            status = STATUS_EXTINCT
            cnt[C_EXTINCT_DAY] = day + 1
            break
    return status, types_pos, types_parent, weekly


# --------------------------------------------------------------------------
# inverse-CDF Monte Carlo summation


@njit(cache=True)
def _interp_sorted(levels, values, u):
    n = levels.shape[0]
    if u <= levels[0]:
        return values[0]
    if u >= levels[n - 1]:
        return values[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if levels[mid] <= u:
            lo = mid
        else:
            hi = mid
    w = (u - levels[lo]) / (levels[hi] - levels[lo])
    return values[lo] + w * (values[hi] - values[lo])


@njit(cache=True)
def _sum_inverse_cdf_jit(levels, values, u):
    n_draws, n_var = u.shape
    out = np.zeros(n_draws)
    for i in range(n_draws):
        acc = 0.0
        for v in range(n_var):
            acc += _interp_sorted(levels, values[v], u[i, v])
        out[i] = acc
    return out


def _sum_inverse_cdf_numpy(levels, values, u):
    out = np.zeros(u.shape[0])
    for v in range(values.shape[0]):
        out += np.interp(u[:, v], levels, values[v])
    return out


def sum_inverse_cdf(levels, values, u):
    """Sum of per-variant inverse-CDF samples.

    ``values`` is (n_variants, n_levels), ``u`` is (n_draws, n_variants);
    returns the n_draws totals.
    """
    levels = np.ascontiguousarray(levels, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if USE_NUMBA:
        return _sum_inverse_cdf_jit(levels, values, u)
    return _sum_inverse_cdf_numpy(levels, values, u)


# --------------------------------------------------------------------------
# bootstrap gather


@njit(cache=True)
def _gather_block_sums_jit(block_sums, loc_idx, start_idx):
    n_models = block_sums.shape[0]
    n_reps, n_loc = loc_idx.shape
    n_blocks = start_idx.shape[2]
    out = np.zeros((n_reps, n_models))
    for r in range(n_reps):
        for i in range(n_loc):
            loc = loc_idx[r, i]
            for b in range(n_blocks):
                s = start_idx[r, i, b]
                for m in range(n_models):
                    out[r, m] += block_sums[m, loc, s]
    return out


def _gather_block_sums_numpy(block_sums, loc_idx, start_idx):
    locs = np.broadcast_to(loc_idx[:, :, None], start_idx.shape)
    picked = block_sums[:, locs, start_idx]  # (models, reps, loc, blocks)
    return picked.sum(axis=(2, 3)).T


def gather_block_sums(block_sums, loc_idx, start_idx):
    """Per-replicate totals of precomputed block sums.

    ``block_sums[m, loc, s]`` is the sum of model ``m``'s scores over the block
    of dates starting at ``s``; ``loc_idx`` is (reps, n_loc) and ``start_idx``
    is (reps, n_loc, n_blocks).  Returns (reps, models).
    """
    block_sums = np.ascontiguousarray(block_sums, dtype=np.float64)
    loc_idx = np.ascontiguousarray(loc_idx, dtype=np.int64)
    start_idx = np.ascontiguousarray(start_idx, dtype=np.int64)
    if USE_NUMBA:
        return _gather_block_sums_jit(block_sums, loc_idx, start_idx)
    return _gather_block_sums_numpy(block_sums, loc_idx, start_idx)


@njit(cache=True)
def _gather_cells_jit(cell_scores, cell_idx):
    n_models = cell_scores.shape[0]
    n_reps, n_draw = cell_idx.shape
    out = np.zeros((n_reps, n_models))
    for r in range(n_reps):
        for i in range(n_draw):
            c = cell_idx[r, i]
            for m in range(n_models):
                out[r, m] += cell_scores[m, c]
    return out


def gather_cells(cell_scores, cell_idx):
    """Per-replicate totals for iid resampling of flat record cells."""
    cell_scores = np.ascontiguousarray(cell_scores, dtype=np.float64)
    cell_idx = np.ascontiguousarray(cell_idx, dtype=np.int64)
    if USE_NUMBA:
        return _gather_cells_jit(cell_scores, cell_idx)
    return cell_scores[:, cell_idx].sum(axis=2).T
