"""Dataset handling: CSV ingestion, temporal splits, alignment, synthesis.

The on-disk format is a single CSV with the exact header

    timestamp,drying_eq,wetting_eq,solar,wind,rain,hour,doy,elevation,lon,lat,fm1,fm10,fm100,fm1000

Timestamps are RFC 3339 UTC on the hour with no gaps; fuel-moisture
cells are empty where no observation exists. Weather rows are hourly and
contiguous; by default a gap is a parse error, and ``fill="hold"``
forward-fills gaps of up to three hours.

Splitting is purely temporal: the default rule assigns the first 8,761
hourly rows (one year inclusive) to training and halves the remainder
into validation and test, validation taking the extra row when the
remainder is odd.

Synthetic weather is a diurnal-plus-seasonal process with Poisson rain
arrivals; synthetic targets run the first-order time-lag recursion on
the drying equilibrium, pushed toward a wet saturation value during rain
hours, optionally clipped at a sensor-saturation cap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmwarp import timelag
from fmwarp.errors import AlignmentError, InvalidInputError, ParseError, SplitError

FUEL_CLASSES = ("fm1", "fm10", "fm100", "fm1000")
NOMINAL_TAU = {"fm1": 1.0, "fm10": 10.0, "fm100": 100.0, "fm1000": 1000.0}

WEATHER_COLUMNS = (
    "drying_eq", "wetting_eq", "solar", "wind", "rain",
    "hour", "doy", "elevation", "lon", "lat",
)
CSV_HEADER = ("timestamp",) + WEATHER_COLUMNS + FUEL_CLASSES

HOUR = np.timedelta64(1, "h")

# Default split rule: one year of hourly rows inclusive of both endpoints.
TRAIN_ROWS_ONE_YEAR = 8761

# Synthetic rain response: recursion input is pushed toward this moisture
# during rain hours, scaled by intensity relative to RAIN_SATURATION_MMH.
WET_SATURATION_PCT = 60.0
RAIN_SATURATION_MMH = 5.0


@dataclass(frozen=True)
class WeatherFrame:
    """Hourly predictor matrix with UTC timestamps (strictly increasing, 1 h apart)."""

    times: np.ndarray  # datetime64[s]
    drying_eq: np.ndarray
    wetting_eq: np.ndarray
    solar: np.ndarray
    wind: np.ndarray
    rain: np.ndarray
    hour: np.ndarray
    doy: np.ndarray
    elevation: np.ndarray
    lon: np.ndarray
    lat: np.ndarray

    def __post_init__(self):
        n = self.times.size
        if n == 0:
            raise InvalidInputError("weather frame must be non-empty")
        for name in WEATHER_COLUMNS:
            if getattr(self, name).shape != (n,):
                raise InvalidInputError(f"column {name} length mismatch")
        deltas = np.diff(self.times)
        if n > 1 and not (deltas == HOUR).all():
            raise InvalidInputError("timestamps must be strictly increasing with 1-hour spacing")
        if (self.rain < 0).any() or (self.solar < 0).any():
            raise InvalidInputError("rain and solar must be non-negative")
        if ((self.hour < 0) | (self.hour > 23)).any():
            raise InvalidInputError("hour_of_day must lie in [0, 23]")

    def __len__(self) -> int:
        return self.times.size

    def columns(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEATHER_COLUMNS}

    def slice(self, mask: np.ndarray) -> "WeatherFrame":
        return WeatherFrame(
            times=self.times[mask],
            **{name: getattr(self, name)[mask] for name in WEATHER_COLUMNS},
        )


@dataclass(frozen=True)
class FmcSeries:
    """Sparse timestamped fuel-moisture observations for one fuel class."""

    fuel_class: str
    times: np.ndarray  # datetime64[s]
    values: np.ndarray  # percent

    def __post_init__(self):
        if self.fuel_class not in FUEL_CLASSES:
            raise InvalidInputError(f"unknown fuel class {self.fuel_class!r}")
        if self.times.shape != self.values.shape:
            raise InvalidInputError("observation times/values length mismatch")
        if self.times.size > 1 and not (np.diff(self.times) > np.timedelta64(0, "s")).all():
            raise InvalidInputError("observation timestamps must be strictly increasing")
        if (self.values < 0).any():
            raise InvalidInputError("fuel moisture observations must be non-negative")

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class SplitSpec:
    """Temporal boundaries: train is t <= train_end, validation train_end < t <= val_end."""

    train_end: np.datetime64
    val_end: np.datetime64

    def __post_init__(self):
        if not self.train_end < self.val_end:
            raise SplitError(f"train_end {self.train_end} must precede val_end {self.val_end}")


@dataclass(frozen=True)
class Partition:
    """One temporal partition: weather rows plus per-class observations."""

    weather: WeatherFrame
    observations: dict[str, FmcSeries]


@dataclass(frozen=True)
class Split:
    train: Partition
    val: Partition
    test: Partition


def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if not text.endswith("Z"):
        raise ValueError(f"timestamp {text!r} is not RFC 3339 UTC (missing Z)")
    return np.datetime64(text[:-1], "s")


def format_timestamp(t: np.datetime64) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def load_csv(path, fill: str | None = None) -> tuple[WeatherFrame, list[FmcSeries]]:
    """Parse a dataset CSV into a weather frame and per-class observation series.

    ``fill="hold"`` forward-fills weather across gaps of up to 3 hours;
    any other gap, a duplicate or backward timestamp, a malformed cell,
    or a header mismatch raises :class:`ParseError` with the 1-based file
    row number.
    """
    if fill not in (None, "hold"):
        raise InvalidInputError(f"unknown fill mode {fill!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            unknown = [h for h in header if h.strip() not in CSV_HEADER]
            raise ParseError(
                f"header mismatch; unknown or misplaced columns {unknown}", row=1
            )
        times: list[np.datetime64] = []
        weather_rows: list[list[float]] = []
        fmc_obs: dict[str, list[tuple[np.datetime64, float]]] = {c: [] for c in FUEL_CLASSES}
        n_weather = len(WEATHER_COLUMNS)
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} cells, got {len(row)}", row=rownum)
            try:
                t = parse_timestamp(row[0])
            except ValueError as exc:
                raise ParseError(str(exc), row=rownum) from None
            if times:
                delta = t - times[-1]
                if delta <= np.timedelta64(0, "s"):
                    raise ParseError(f"non-monotone or duplicate timestamp {row[0]}", row=rownum)
                if delta != HOUR:
                    gap_hours = delta // HOUR
                    if fill == "hold" and delta % HOUR == np.timedelta64(0, "s") and gap_hours <= 4:
                        for k in range(1, int(gap_hours)):
                            held_t = times[-1] + HOUR
                            held = list(weather_rows[-1])
                            held[WEATHER_COLUMNS.index("hour")] = float(
                                (held_t - held_t.astype("datetime64[D]")) // HOUR
                            )
                            times.append(held_t)
                            weather_rows.append(held)
                    else:
                        raise ParseError(
                            f"gap of {delta} before {row[0]} (expected 1 hour)", row=rownum
                        )
            try:
                wx = [float(cell) for cell in row[1 : 1 + n_weather]]
            except ValueError:
                raise ParseError("malformed weather value", row=rownum) from None
            times.append(t)
            weather_rows.append(wx)
            for ci, cls in enumerate(FUEL_CLASSES):
                cell = row[1 + n_weather + ci].strip()
                if cell == "":
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"malformed {cls} value {cell!r}", row=rownum) from None
                fmc_obs[cls].append((t, value))
    if not times:
        raise ParseError("no data rows", row=2)
    wx_arr = np.asarray(weather_rows, dtype=float)
    frame = WeatherFrame(
        times=np.asarray(times, dtype="datetime64[s]"),
        **{name: wx_arr[:, k] for k, name in enumerate(WEATHER_COLUMNS)},
    )
    series = []
    for cls in FUEL_CLASSES:
        if fmc_obs[cls]:
            obs_t = np.asarray([t for t, _ in fmc_obs[cls]], dtype="datetime64[s]")
            obs_v = np.asarray([v for _, v in fmc_obs[cls]], dtype=float)
            series.append(FmcSeries(fuel_class=cls, times=obs_t, values=obs_v))
    return frame, series


def write_csv(path, frame: WeatherFrame, series: list[FmcSeries]) -> None:
    """Write a schema-conformant CSV; floats use repr for exact round trips."""
    by_class: dict[str, dict[np.datetime64, float]] = {c: {} for c in FUEL_CLASSES}
    for s in series:
        by_class[s.fuel_class] = {t: v for t, v in zip(s.times, s.values)}
    cols = frame.columns()
    lines = [",".join(CSV_HEADER)]
    for k, t in enumerate(frame.times):
        cells = [format_timestamp(t)]
        cells += [repr(float(cols[name][k])) for name in WEATHER_COLUMNS]
        for cls in FUEL_CLASSES:
            v = by_class[cls].get(t)
            cells.append("" if v is None else repr(float(v)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def default_split_spec(frame: WeatherFrame, train_rows: int = TRAIN_ROWS_ONE_YEAR) -> SplitSpec:
    """Split boundaries from a row-count rule: ``train_rows`` rows of
    training, the remainder halved with validation taking the odd row."""
    n = len(frame)
    remaining = n - train_rows
    if train_rows < 1 or remaining < 2:
        raise SplitError(
            f"frame has {n} rows; cannot take {train_rows} for training and split the rest"
        )
    n_val = (remaining + 1) // 2
    return SplitSpec(
        train_end=frame.times[train_rows - 1],
        val_end=frame.times[train_rows + n_val - 1],
    )


def fraction_split_spec(frame: WeatherFrame, train_frac: float = 0.6) -> SplitSpec:
    """Row-count rule with the training size given as a fraction."""
    if not 0.0 < train_frac < 1.0:
        raise SplitError(f"train_frac must lie in (0,1), got {train_frac}")
    return default_split_spec(frame, train_rows=int(round(len(frame) * train_frac)))


def split(frame: WeatherFrame, series: list[FmcSeries], spec: SplitSpec) -> Split:
    """Partition weather and observations at the split boundaries.

    Every timestamp lands in exactly one partition; an empty weather
    partition raises :class:`SplitError`.
    """
    if not (frame.times[0] <= spec.train_end < spec.val_end <= frame.times[-1]):
        raise SplitError("split boundaries outside the data span")
    masks = {
        "train": frame.times <= spec.train_end,
        "val": (frame.times > spec.train_end) & (frame.times <= spec.val_end),
        "test": frame.times > spec.val_end,
    }
    parts = {}
    for name, mask in masks.items():
        if not mask.any():
            raise SplitError(f"{name} partition is empty")
        obs = {}
        for s in series:
            sel = (
                (s.times <= spec.train_end)
                if name == "train"
                else (s.times > spec.train_end) & (s.times <= spec.val_end)
                if name == "val"
                else s.times > spec.val_end
            )
            obs[s.fuel_class] = FmcSeries(s.fuel_class, s.times[sel], s.values[sel])
        parts[name] = Partition(weather=frame.slice(mask), observations=obs)
    return Split(**parts)


def align_for_eval(
    times: np.ndarray, predictions: np.ndarray, obs_times: np.ndarray, obs_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pair each observation with the hourly predictions interpolated
    linearly to its exact time; exact at on-the-hour observations."""
    if obs_times.size == 0:
        return np.empty(0), np.empty(0)
    if obs_times.min() < times[0] or obs_times.max() > times[-1]:
        raise AlignmentError("observation outside the prediction span")
    xp = times.astype("datetime64[s]").astype(np.int64)
    x = obs_times.astype("datetime64[s]").astype(np.int64)
    return np.interp(x, xp, predictions), np.asarray(obs_values, dtype=float)


def nearest_hour_mask(
    times: np.ndarray, obs_times: np.ndarray, obs_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Assign each observation to the nearest hourly row (training-side pairing).

    Returns (targets, mask) arrays over the hourly grid; when several
    observations round to the same hour the last one wins.
    """
    n = times.size
    targets = np.zeros(n)
    mask = np.zeros(n)
    if obs_times.size == 0:
        return targets, mask
    grid = times.astype("datetime64[s]").astype(np.int64)
    obs = obs_times.astype("datetime64[s]").astype(np.int64)
    idx = np.clip(np.round((obs - grid[0]) / 3600.0).astype(int), 0, n - 1)
    targets[idx] = obs_values
    mask[idx] = 1.0
    return targets, mask


@dataclass(frozen=True)
class Normalizer:
    """Input featurization fit on the training split only.

    Continuous columns are z-scored; hour-of-day and day-of-year are
    encoded as sine/cosine pairs, so the model input has
    ``len(FEATURE_NAMES)`` columns.
    """

    mean: np.ndarray
    std: np.ndarray

    CONTINUOUS = ("drying_eq", "wetting_eq", "solar", "wind", "rain", "elevation", "lon", "lat")
    FEATURE_NAMES = CONTINUOUS + ("hour_sin", "hour_cos", "doy_sin", "doy_cos")

    @classmethod
    def fit(cls, frame: WeatherFrame) -> "Normalizer":
        raw = np.stack([getattr(frame, c) for c in cls.CONTINUOUS], axis=1)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        # Constant columns (station coordinates) pass through centered; the
        # threshold is relative so summation noise on large values is caught.
        std = np.where(std <= 1e-9 * (1.0 + np.abs(mean)), 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, frame: WeatherFrame) -> np.ndarray:
        raw = np.stack([getattr(frame, c) for c in self.CONTINUOUS], axis=1)
        z = (raw - self.mean) / self.std
        hour_angle = 2.0 * np.pi * frame.hour / 24.0
        doy_angle = 2.0 * np.pi * frame.doy / 365.25
        cyc = np.stack(
            [np.sin(hour_angle), np.cos(hour_angle), np.sin(doy_angle), np.cos(doy_angle)],
            axis=1,
        )
        return np.concatenate([z, cyc], axis=1)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mean=np.asarray(d["mean"], dtype=float), std=np.asarray(d["std"], dtype=float))


N_FEATURES = len(Normalizer.FEATURE_NAMES)
DRYING_EQ_FEATURE = Normalizer.FEATURE_NAMES.index("drying_eq")


@dataclass(frozen=True)
class TargetScaler:
    """Z-scoring for the training targets, fit on the training split.

    The model is trained in scaled units so the cell state works in the
    linear range of its activations; predictions are mapped back to
    percent before any evaluation.
    """

    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "TargetScaler":
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise InvalidInputError("cannot fit a target scaler on no observations")
        std = float(values.std())
        return cls(mean=float(values.mean()), std=std if std > 1e-12 else 1.0)

    def scale(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def unscale(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetScaler":
        return cls(mean=float(d["mean"]), std=float(d["std"]))


@dataclass(frozen=True)
class SynthProfile:
    """Knobs for the synthetic weather generator (defaults echo the
    summary statistics of a dry-plains station)."""

    start: str = "1996-01-01T00:00:00Z"
    temp_base_k: float = 287.0
    temp_seasonal_amp: float = 8.0
    temp_diurnal_amp: float = 5.0
    temp_synoptic_amp: float = 2.5  # multi-day weather-system variation
    temp_synoptic_tau_h: float = 72.0
    temp_noise: float = 1.0
    rh_base: float = 62.0
    rh_temp_slope: float = 2.4
    rh_noise: float = 5.0
    solar_peak: float = 900.0
    wind_mean: float = 2.5
    wind_noise: float = 1.1
    rain_rate: float = 0.08  # target mean, mm/h
    rain_intensity: float = 1.6  # mean event intensity, mm/h
    elevation: float = 774.0
    lon: float = -100.26
    lat: float = 36.60


def _calendar_columns(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    days = times.astype("datetime64[D]")
    hour = ((times - days) // HOUR).astype(float)
    jan1 = times.astype("datetime64[Y]").astype("datetime64[D]")
    doy = (days - jan1).astype(int).astype(float) + 1.0
    return hour, doy


def synth_weather(seed: int, n_days: int, profile: SynthProfile = SynthProfile()) -> WeatherFrame:
    """Deterministic synthetic hourly weather: diurnal and seasonal
    sinusoids plus noise, with Poisson-arrival rain events."""
    if n_days < 1:
        raise InvalidInputError(f"n_days must be >= 1, got {n_days}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57EA]))
    n = int(n_days) * 24
    start = parse_timestamp(profile.start)
    times = start + np.arange(n) * HOUR
    hour, doy = _calendar_columns(times)

    seasonal = np.sin(2.0 * np.pi * (doy - 110.0) / 365.25)
    diurnal = np.sin(2.0 * np.pi * (hour - 9.0) / 24.0)
    # Slow AR(1) synoptic swings: stationary, multi-day correlation.
    rho = np.exp(-1.0 / profile.temp_synoptic_tau_h)
    innovations = rng.normal(0.0, profile.temp_synoptic_amp * np.sqrt(1.0 - rho**2), n)
    synoptic = np.empty(n)
    synoptic[0] = rng.normal(0.0, profile.temp_synoptic_amp)
    for t in range(1, n):
        synoptic[t] = rho * synoptic[t - 1] + innovations[t]
    temp_k = (
        profile.temp_base_k
        + profile.temp_seasonal_amp * seasonal
        + profile.temp_diurnal_amp * diurnal
        + synoptic
        + rng.normal(0.0, profile.temp_noise, n)
    )
    rh = np.clip(
        profile.rh_base
        - profile.rh_temp_slope * (temp_k - profile.temp_base_k)
        + rng.normal(0.0, profile.rh_noise, n),
        3.0,
        100.0,
    )
    drying, wetting = timelag.equilibria_arrays(temp_k, rh)

    solar = np.clip(
        np.maximum(0.0, np.sin(np.pi * (hour - 6.0) / 12.0))
        * (profile.solar_peak * (0.75 + 0.25 * seasonal))
        + rng.normal(0.0, 15.0, n),
        0.0,
        1177.0,
    )
    wind = np.clip(profile.wind_mean + profile.wind_noise * rng.normal(0.0, 1.0, n), 0.40, 8.61)

    # Rain: Bernoulli event starts, short uniform durations, exponential
    # intensity; start probability tuned so the mean lands near rain_rate.
    mean_duration, mean_intensity = 3.0, profile.rain_intensity
    p_start = profile.rain_rate / (mean_duration * mean_intensity)
    rain = np.zeros(n)
    starts = np.flatnonzero(rng.random(n) < p_start) if p_start > 0 else np.empty(0, int)
    for s in starts:
        duration = int(rng.integers(1, 6))
        intensity = rng.exponential(mean_intensity)
        rain[s : s + duration] += intensity
    rain = np.clip(rain, 0.0, 42.17)

    const = np.full(n, 1.0)
    return WeatherFrame(
        times=times,
        drying_eq=drying,
        wetting_eq=wetting,
        solar=solar,
        wind=wind,
        rain=rain,
        hour=hour,
        doy=doy,
        elevation=profile.elevation * const,
        lon=profile.lon * const,
        lat=profile.lat * const,
    )


def synth_targets(
    frame: WeatherFrame,
    tau: float,
    sensor_cap: float | None = None,
    fuel_class: str = "fm10",
) -> FmcSeries:
    """Dense hourly targets from the time-lag recursion on the drying
    equilibrium; rain hours pull the input toward a wet saturation value,
    and ``sensor_cap`` clips the result (FM10 sensor saturation)."""
    params = timelag.TimeLagParams.from_tau(tau)
    x = frame.drying_eq.copy()
    wet = frame.rain > 0.0
    if wet.any():
        pull = np.minimum(1.0, frame.rain[wet] / RAIN_SATURATION_MMH)
        x[wet] = x[wet] + (WET_SATURATION_PCT - x[wet]) * pull
    values = np.empty(len(frame))
    values[0] = x[0]
    if len(frame) > 1:
        values[1:] = timelag.simulate(x[0], x[1:], params)
    if sensor_cap is not None:
        values = np.minimum(values, float(sensor_cap))
    return FmcSeries(fuel_class=fuel_class, times=frame.times.copy(), values=values)
