"""Instance generators: adversarial worst-case chains and synthetic networks.

The worst-case generator realizes the tight fleet-size bound: a chain of n
trips, n-1 single-slot recharge stations and n-1 depots whose geometry is
encoded directly as a consumption table.  Charge windows are enforced by
zeroing the grid limit outside them.  Under the exact curve one bus covers
the whole chain; under a coarse increment-domain approximation every
multi-trip course fails, forcing one bus per trip (and vice versa for the
sign-flipped overestimation variant, where the approximation accepts a
schedule the exact physics rejects).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chargemodel import (ChargingPowerProfile, build_overestimator,
                          build_underestimator, solve_max_power_curve)
from .instance import (Charger, Deadhead, Depot, GridPoint, Instance,
                       Trip, VehicleType)


class GenerationError(ValueError):
    """Requested generator parameters cannot produce a valid instance."""


# ---------------------------------------------------------------------------
# Worst-case chain
# ---------------------------------------------------------------------------

WC_PROFILE_NAME = "wc-quadratic"
WC_TYPE = "ebus"
WC_BATTERY_KWH = 300.0

TRIP_DURATION = 1800
LEG_DURATION = 300
DEPOT_LEG_DURATION = 900


def _wc_profile() -> ChargingPowerProfile:
    # CC phase of 10 minutes, strongly curved CV tail: coarse PWL domains
    # leave a fat approximation gap on purpose
    return ChargingPowerProfile(cc_rate=0.5 / 600.0, cv_break=0.5,
                                cv_shape="quadratic", name=WC_PROFILE_NAME)


def generate_worst_case(n: int, delta: float, epsilon_target: float,
                        estimator: str = "under", theta: float = 300.0,
                        segments: int = 2) -> Instance:
    """Adversarial chain instance with n trips and n-1 recharge stations.

    ``epsilon_target`` is the approximation error the geometry is built
    around (the soc deficit / surplus of a full recharge window under the
    coarse domain at (theta, segments)); ``delta`` shortens (underestimation)
    or lengthens (overestimation) the station-to-station shortcut legs and
    must leave the approximate surplus strictly unusable.
    """
    if n < 2:
        raise GenerationError("need n >= 2 trips for the chain construction")
    if not 0.0 < delta < epsilon_target:
        raise GenerationError("need 0 < delta < epsilon_target")
    if estimator not in ("under", "over"):
        raise GenerationError(f"unknown estimator {estimator!r}")
    if theta <= 0 or segments < 2:
        raise GenerationError("theta must be positive and segments >= 2")

    profile = _wc_profile()
    curve = solve_max_power_curve(profile)
    cap = curve.soc_cap
    y_pad = min(epsilon_target / 8.0, 0.01)
    e_b = min(epsilon_target / 16.0, 0.005)
    e_dep = e_b / 4.0

    if estimator == "under":
        domain = build_underestimator(curve, theta, segments)
        k = math.ceil((curve.t_full - float(curve.time_at(y_pad))) / theta)
        deficit = cap - domain.greedy_final_soc(y_pad, k)
        slack = max(delta, e_b - e_dep + (1.0 - cap))
        required = y_pad + max(delta, e_b - e_dep) + slack + 1e-6
        if deficit < epsilon_target:
            raise GenerationError(
                f"coarse underestimator (m={segments}, theta={theta}) only "
                f"loses {deficit:.6f} soc over a full window; the station "
                f"spacing inequality needs epsilon_target <= {deficit:.6f}")
        if deficit < required:
            raise GenerationError(
                f"deficit {deficit:.6f} does not dominate the shortcut "
                f"margins ({required:.6f}); choose a smaller delta "
                "(station spacing must exceed the approximate surplus)")
        e_trip = cap - 2.0 * e_b - y_pad
        e_first = e_b + (1.0 - cap)  # depot leg keeping the chain arithmetic flush
        hop = e_trip + 2.0 * e_b - delta
        depot_shortcut = e_first + e_trip + e_b - delta
        approx_target = cap  # what the approximation must fail to sustain
    else:
        domain = build_overestimator(curve, theta, segments)
        k_full = math.ceil(curve.t_full / theta)
        best_k, best_gain = None, 0.0
        for k_try in range(1, k_full + 1):
            over_end = domain.greedy_final_soc(y_pad, k_try)
            exact_end = y_pad + float(curve.increment(y_pad, k_try * theta))
            gain = over_end - exact_end
            if gain > best_gain:
                best_k, best_gain = k_try, gain
            if gain >= epsilon_target:
                best_k, best_gain = k_try, gain
                break
        if best_gain < epsilon_target:
            raise GenerationError(
                f"coarse overestimator (m={segments}, theta={theta}) only "
                f"overshoots by {best_gain:.6f} soc; epsilon_target must not "
                f"exceed that")
        k = best_k
        surplus = best_gain
        if surplus < y_pad + e_b - e_dep + 1e-6:
            raise GenerationError(
                f"overshoot {surplus:.6f} below the blocking margin "
                f"{y_pad + e_b - e_dep:.6f}")
        approx_end = domain.greedy_final_soc(y_pad, k)
        e_trip = approx_end - y_pad - 2.0 * e_b
        e_first = 1.0 - approx_end + e_b
        # lengthened shortcuts (sign-flipped construction); a leg at 1.0 soc
        # is every bit as unusable as one just above it
        hop = min(e_trip + 2.0 * e_b + delta, 1.0)
        depot_shortcut = min(e_first + e_trip + e_b + delta, 1.0)
        deficit = surplus
        approx_target = approx_end
    if not 0.0 < e_trip < 1.0:
        raise GenerationError(f"trip consumption {e_trip:.6f} out of range")

    window_len = int(round(k * theta))
    period = TRIP_DURATION + LEG_DURATION + window_len + LEG_DURATION
    t0 = 4 * 3600
    raw_end = (t0 + (n - 1) * period + TRIP_DURATION + DEPOT_LEG_DURATION
               + 3600)
    span = int(math.ceil((raw_end - (t0 - 3600)) / theta) * theta)
    horizon = (t0 - 3600, t0 - 3600 + span)

    etype = VehicleType(WC_TYPE, True, WC_BATTERY_KWH, fixed_cost=1000.0)
    depots = [Depot("d1")] + [Depot(f"d{j}") for j in range(2, n)]

    trips, windows = [], []
    for i in range(1, n + 1):
        dep = t0 + (i - 1) * period
        trips.append(Trip(f"t{i}", f"t{i}S", f"t{i}E", dep, dep + TRIP_DURATION,
                          {WC_TYPE: round(e_trip, 9)}))
    for i in range(1, n):
        w_start = trips[i - 1].arrival_s + LEG_DURATION
        windows.append((w_start, w_start + window_len))

    rated_kw = profile.cc_rate * WC_BATTERY_KWH * 3600.0 * 1.02
    grid_points, chargers = [], []
    for i, (ws, we) in enumerate(windows, start=1):
        spans = []
        if ws > horizon[0]:
            spans.append((horizon[0], ws, 0.0))
        spans.append((ws, we, round(rated_kw, 6)))
        if we < horizon[1]:
            spans.append((we, horizon[1], 0.0))
        grid_points.append(GridPoint(f"g{i}", tuple(spans),
                                     ((horizon[0], horizon[1], 0.2),)))
        chargers.append(Charger(f"s{i}", 1, f"g{i}", {WC_TYPE: WC_PROFILE_NAME}))

    def dh(a, b, dur, cons):
        return Deadhead(a, b, int(dur), {WC_TYPE: round(cons, 9)},
                        {WC_TYPE: round(dur / 60.0, 6)})

    deadheads = [dh("d1", "t1S", DEPOT_LEG_DURATION, e_first),
                 dh(f"t{n}E", "d1", DEPOT_LEG_DURATION, e_dep),
                 dh("t1E", "d1", DEPOT_LEG_DURATION, e_dep),
                 dh("d1", f"t{n}S", DEPOT_LEG_DURATION, e_dep)]
    for j in range(2, n):
        deadheads.append(dh(f"d{j}", f"t{j}S", DEPOT_LEG_DURATION, e_dep))
        deadheads.append(dh(f"t{j}E", f"d{j}", DEPOT_LEG_DURATION, e_dep))
    for i in range(1, n):
        deadheads.append(dh(f"t{i}E", f"s{i}", LEG_DURATION, e_b))
        deadheads.append(dh(f"s{i}", f"t{i + 1}S", LEG_DURATION, e_b))
    gap = LEG_DURATION + TRIP_DURATION + LEG_DURATION
    for i in range(1, n - 1):
        deadheads.append(dh(f"s{i}", f"s{i + 1}", gap, hop))
    deadheads.append(dh("d1", "s1", windows[0][0] - horizon[0], depot_shortcut))

    meta = {
        "kind": "worst-case",
        "estimator": estimator,
        "theta_design": theta,
        "segments_design": segments,
        "delta": delta,
        "epsilon_target": epsilon_target,
        "deficit_achieved": round(deficit, 9),
        "window_steps": k,
        "y_pad": y_pad,
        "e_b": e_b,
        "e_dep": e_dep,
        "e_first": round(e_first, 9),
        "e_trip": round(e_trip, 9),
        "approx_target": round(approx_target, 9),
        "windows": [list(w) for w in windows],
        "profile": WC_PROFILE_NAME,
    }
    inst = Instance(
        vehicle_types=(etype,),
        depots=tuple(depots),
        trips=tuple(trips),
        deadheads=tuple(deadheads),
        chargers=tuple(chargers),
        grid_points=tuple(grid_points),
        profiles={WC_PROFILE_NAME: _wc_profile()},
        mix_constraints=(),
        horizon=horizon,
        meta=meta,
    )
    inst.validate()
    return inst


# ---------------------------------------------------------------------------
# Synthetic networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    """Shape knobs for the synthetic generator.

    Bounds mirror the instance-library spread (tens to ~1300 trips, a
    handful of bus types and depots, charger slots shared over one or two
    grid access points).
    """

    trips: int = 20
    electric_types: int = 1
    non_electric_types: int = 0
    depots: int = 1
    chargers: int = 1
    slots_per_charger: int = 2
    grid_points: int = 1
    horizon_start_s: int = 6 * 3600
    horizon_end_s: int = 20 * 3600

    def validate(self):
        if not 2 <= self.trips <= 1300:
            raise GenerationError("trips must be in [2, 1300]")
        if self.electric_types < 1:
            raise GenerationError("need at least one electric type")
        if self.depots < 1 or self.chargers < 0 or self.grid_points < 1:
            raise GenerationError("depots >= 1, chargers >= 0, grid_points >= 1")
        if self.chargers and self.slots_per_charger < 1:
            raise GenerationError("slots_per_charger must be >= 1")
        if self.horizon_end_s - self.horizon_start_s < 2 * 3600:
            raise GenerationError("horizon must span at least two hours")


def generate_synthetic(params: SyntheticParams, seed: int) -> Instance:
    """Random but feasible-by-construction network.

    Every trip is round-trip reachable from some depot on a full battery, so
    the one-bus-per-trip schedule is always energy-feasible.  Deterministic
    for a fixed (params, seed): all floats are rounded before they enter the
    instance.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    start, end = params.horizon_start_s, params.horizon_end_s

    n_term = max(4, min(12, params.trips // 5 + 2))
    # abstract geometry: coordinates in "travel minutes"
    coords = {}
    for i in range(n_term):
        coords[f"T{i}"] = rng.uniform(0.0, 22.0, size=2)
    for j in range(params.depots):
        coords[f"D{j}"] = rng.uniform(4.0, 18.0, size=2)
    charger_ids = []
    for c in range(params.chargers):
        cid = f"C{c}"
        charger_ids.append(cid)
        anchor = coords[f"T{c % n_term}"]
        coords[cid] = anchor + rng.uniform(-2.0, 2.0, size=2)

    def minutes(a, b):
        d = coords[a] - coords[b]
        return float(np.hypot(d[0], d[1])) + 3.0

    vtypes = []
    for i in range(params.electric_types):
        vtypes.append(VehicleType(f"e{i}", True, round(250.0 + 50.0 * i, 3),
                                  fixed_cost=1000.0))
    for i in range(params.non_electric_types):
        vtypes.append(VehicleType(f"f{i}", False, 0.0, fixed_cost=900.0))
    etype_ids = [v.id for v in vtypes if v.electric]

    # drain rate chosen so a ~30 min trip costs 20-28% soc per electric type:
    # a bus manages 3-4 trips on one charge and in-service recharging pays off
    drain = {v.id: round(rng.uniform(0.00011, 0.00015), 10) for v in vtypes
             if v.electric}

    def consumption(duration_s):
        return {k: round(min(duration_s * r, 0.45), 6) for k, r in drain.items()}

    trips = []
    deps = np.sort(rng.uniform(start + 1800, end - 3 * 3600, size=params.trips))
    for i in range(params.trips):
        a, b = rng.choice(n_term, size=2, replace=False)
        o, d = f"T{a}", f"T{b}"
        dur = int(60.0 * minutes(o, d) + rng.integers(600, 1500))
        dep = int(deps[i])
        trips.append(Trip(f"t{i:03d}", o, d, dep, dep + dur, consumption(dur)))

    def leg_cost(duration_s):
        return {v.id: round(duration_s / 60.0 * 1.0, 6) for v in vtypes}

    deadheads = []
    seen = set()

    def add_dh(a, b):
        if a == b or (a, b) in seen:
            return
        seen.add((a, b))
        dur = int(60.0 * minutes(a, b))
        deadheads.append(Deadhead(a, b, dur, consumption(dur), leg_cost(dur)))

    used = {t.origin for t in trips} | {t.destination for t in trips}
    terminals = [f"T{i}" for i in range(n_term) if f"T{i}" in used]
    for j in range(params.depots):
        for t in terminals:
            add_dh(f"D{j}", t)
            add_dh(t, f"D{j}")
    for a in terminals:
        for b in terminals:
            if a != b and minutes(a, b) < 26.0:
                add_dh(a, b)
    for cid in charger_ids:
        for t in terminals:
            if minutes(t, cid) < 26.0:
                add_dh(t, cid)
                add_dh(cid, t)
        for j in range(params.depots):
            add_dh(f"D{j}", cid)
            add_dh(cid, f"D{j}")

    profiles = {}
    for i, vid in enumerate(etype_ids):
        # constant-current span of ~40 min up to 70%, quadratic tail
        profiles[f"fast-{vid}"] = ChargingPowerProfile(
            cc_rate=round(0.7 / (2400.0 + 300.0 * i), 12), cv_break=0.7,
            cv_shape="quadratic", name=f"fast-{vid}")

    grid_points = []
    rated_total = 0.0
    for vid in etype_ids:
        bat = next(v.battery_kwh for v in vtypes if v.id == vid)
        rated_total = max(rated_total,
                          profiles[f"fast-{vid}"].cc_rate * bat * 3600.0)
    for g in range(params.grid_points):
        capacity = round(rated_total * max(1, params.chargers)
                         * params.slots_per_charger * 1.2, 6)
        price = ((start, 12 * 3600, 0.25), (12 * 3600, 15 * 3600, 0.35),
                 (15 * 3600, end, 0.25))
        price = tuple((max(s, start), min(e, end), p) for s, e, p in price
                      if max(s, start) < min(e, end))
        grid_points.append(GridPoint(f"G{g}", ((start, end, capacity),), price))

    chargers = []
    for c, cid in enumerate(charger_ids):
        chargers.append(Charger(cid, params.slots_per_charger,
                                f"G{c % params.grid_points}",
                                {vid: f"fast-{vid}" for vid in etype_ids}))

    inst = Instance(
        vehicle_types=tuple(vtypes),
        depots=tuple(Depot(f"D{j}") for j in range(params.depots)),
        trips=tuple(trips),
        deadheads=tuple(deadheads),
        chargers=tuple(chargers),
        grid_points=tuple(grid_points),
        profiles=profiles,
        mix_constraints=(),
        horizon=(start, end),
        meta={"kind": "synthetic", "seed": seed,
              "params": {"trips": params.trips,
                         "electric_types": params.electric_types,
                         "non_electric_types": params.non_electric_types,
                         "depots": params.depots,
                         "chargers": params.chargers,
                         "slots_per_charger": params.slots_per_charger,
                         "grid_points": params.grid_points}},
    )
    inst.validate()
    _check_unique_bus_premise(inst)
    return inst


def _check_unique_bus_premise(inst: Instance) -> None:
    """Every trip must be round-trip coverable from some depot on one charge."""
    dh = inst.deadhead_map()
    for t in inst.trips:
        ok = False
        for d in inst.depots:
            out = dh.get((d.id, t.origin))
            back = dh.get((t.destination, d.id))
            if out is None or back is None:
                continue
            feasible = True
            for v in inst.vehicle_types:
                if not v.electric:
                    continue
                total = (out.consumption.get(v.id, 0.0)
                         + t.consumption.get(v.id, 0.0)
                         + back.consumption.get(v.id, 0.0))
                if total > 1.0:
                    feasible = False
            if feasible:
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"trip {t.id} is not round-trip reachable from any depot")
