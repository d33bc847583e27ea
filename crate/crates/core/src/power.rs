//! Power management unit: core-state transitions, per-state current draw,
//! charge accounting and lifetime estimation.
//!
//! Currents are piecewise constant per [`CoreState`]; a radio costs energy
//! only through the time its core spends powered. Charge is tracked in mAh.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoreState, McuState, SocState};
use crate::num::Scalar;

/// Capacity assumed for a pair of alkaline AA cells.
pub const TWO_AA_CAPACITY_MAH: f64 = 2900.0;

const SECONDS_PER_HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerError {
    #[error("duration must be non-negative, got {0}")]
    NegativeDuration(f64),
    #[error("profile fractions must be non-negative, got {0}")]
    NegativeFraction(f64),
    #[error("profile fractions sum to {0}, expected 1")]
    FractionsNotUnit(f64),
    #[error("capacity must be non-negative, got {0}")]
    NegativeCapacity(f64),
    #[error("current for {state} must be positive, got {value}")]
    NonPositiveCurrent { state: CoreState, value: f64 },
}

/// Measured supply current for every joint core state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel<S> {
    currents_ma: [S; CoreState::COUNT],
    /// Informational only; charge is accounted in mAh.
    pub supply_voltage: S,
}

impl<S: Scalar> EnergyModel<S> {
    /// The characterisation table of the reference node, in mA.
    pub fn measured() -> Self {
        use McuState as M;
        use SocState as C;
        // (mcu, soc, numerator, denominator)
        let table: [(M, C, i64, i64); 9] = [
            (M::Active, C::Off, 20, 1),
            (M::Idle, C::Off, 1, 10),
            (M::Off, C::WifiOn, 453, 1),
            (M::Off, C::WifiOff, 335, 1),
            (M::Active, C::WifiOn, 473, 1),
            (M::Active, C::WifiOff, 355, 1),
            (M::Idle, C::WifiOn, 453, 1),
            (M::Idle, C::WifiOff, 335, 1),
            (M::Off, C::Off, 1, 100),
        ];
        let mut currents_ma = [S::zero(); CoreState::COUNT];
        for (mcu, soc, n, d) in table {
            currents_ma[CoreState::new(mcu, soc).index()] = S::ratio(n, d);
        }
        Self { currents_ma, supply_voltage: S::ratio(3, 1) }
    }

    /// Replaces the current for one state. Currents must stay positive.
    pub fn with_current(mut self, state: CoreState, ma: S) -> Result<Self, PowerError> {
        if ma <= S::zero() {
            return Err(PowerError::NonPositiveCurrent { state, value: ma.to_f64_lossy() });
        }
        self.currents_ma[state.index()] = ma;
        Ok(self)
    }

    pub fn current_draw(&self, state: CoreState) -> S {
        self.currents_ma[state.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CoreState, S)> + '_ {
        CoreState::all().map(|s| (s, self.current_draw(s)))
    }

    /// Charge in mAh drawn by `state` over `seconds`.
    pub fn charge_mah(&self, state: CoreState, seconds: S) -> S {
        self.current_draw(state) * seconds / S::ratio(SECONDS_PER_HOUR, 1)
    }
}

impl<S: Scalar> Default for EnergyModel<S> {
    fn default() -> Self {
        Self::measured()
    }
}

/// Battery with an optional capacity; `None` models an unlimited supply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Battery<S> {
    pub capacity_mah: Option<S>,
    consumed_mah: S,
}

impl<S: Scalar> Battery<S> {
    pub fn new(capacity_mah: S) -> Self {
        Self { capacity_mah: Some(capacity_mah), consumed_mah: S::zero() }
    }

    pub fn unlimited() -> Self {
        Self { capacity_mah: None, consumed_mah: S::zero() }
    }

    pub fn consumed_mah(&self) -> S {
        self.consumed_mah
    }

    pub fn remaining_mah(&self) -> Option<S> {
        self.capacity_mah.map(|c| c - self.consumed_mah)
    }

    pub fn is_depleted(&self) -> bool {
        matches!(self.capacity_mah, Some(c) if self.consumed_mah >= c)
    }
}

/// Charges the battery for `duration_s` seconds spent in `state`.
pub fn accrue<S: Scalar>(
    model: &EnergyModel<S>,
    battery: &Battery<S>,
    state: CoreState,
    duration_s: S,
) -> Result<Battery<S>, PowerError> {
    if duration_s < S::zero() {
        return Err(PowerError::NegativeDuration(duration_s.to_f64_lossy()));
    }
    Ok(Battery {
        capacity_mah: battery.capacity_mah,
        consumed_mah: battery.consumed_mah + model.charge_mah(state, duration_s),
    })
}

/// Hours a battery of `capacity_mah` lasts under a duty-cycle profile of
/// `(state, fraction of time)` pairs.
pub fn lifetime_hours<S: Scalar>(
    model: &EnergyModel<S>,
    capacity_mah: S,
    profile: &[(CoreState, S)],
) -> Result<S, PowerError> {
    if capacity_mah < S::zero() {
        return Err(PowerError::NegativeCapacity(capacity_mah.to_f64_lossy()));
    }
    let mut total = S::zero();
    let mut avg_ma = S::zero();
    for &(state, frac) in profile {
        if frac < S::zero() {
            return Err(PowerError::NegativeFraction(frac.to_f64_lossy()));
        }
        total = total + frac;
        avg_ma = avg_ma + frac * model.current_draw(state);
    }
    let tol = S::ratio(1, 1_000_000_000);
    if (total - S::one()).abs() > tol {
        return Err(PowerError::FractionsNotUnit(total.to_f64_lossy()));
    }
    Ok(capacity_mah / avg_ma)
}

/// Commands the nano-controller issues to the supply switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmuCommand {
    WakeMcu,
    IdleMcu,
    SleepMcu,
    /// Power the multimedia board with its radio disabled.
    PowerSoc,
    /// Power the multimedia board with its radio enabled.
    PowerSocWifi,
    /// Enable the radio of an already powered board.
    WifiOn,
    /// Disable the radio of a powered board.
    WifiOff,
    KillSoc,
    SleepAll,
}

impl PmuCommand {
    pub const ALL: [PmuCommand; 9] = [
        PmuCommand::WakeMcu,
        PmuCommand::IdleMcu,
        PmuCommand::SleepMcu,
        PmuCommand::PowerSoc,
        PmuCommand::PowerSocWifi,
        PmuCommand::WifiOn,
        PmuCommand::WifiOff,
        PmuCommand::KillSoc,
        PmuCommand::SleepAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PmuCommand::WakeMcu => "wake_mcu",
            PmuCommand::IdleMcu => "idle_mcu",
            PmuCommand::SleepMcu => "sleep_mcu",
            PmuCommand::PowerSoc => "power_soc",
            PmuCommand::PowerSocWifi => "power_soc_wifi",
            PmuCommand::WifiOn => "wifi_on",
            PmuCommand::WifiOff => "wifi_off",
            PmuCommand::KillSoc => "kill_soc",
            PmuCommand::SleepAll => "sleep_all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        PmuCommand::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Applies a PMU command. Commands only touch the core they name and are
/// idempotent; `WifiOn`/`WifiOff` leave an unpowered board unpowered.
pub fn apply_command(state: CoreState, cmd: PmuCommand) -> CoreState {
    let CoreState { mut mcu, mut soc } = state;
    match cmd {
        PmuCommand::WakeMcu => mcu = McuState::Active,
        PmuCommand::IdleMcu => mcu = McuState::Idle,
        PmuCommand::SleepMcu => mcu = McuState::Off,
        PmuCommand::PowerSoc => soc = SocState::WifiOff,
        PmuCommand::PowerSocWifi => soc = SocState::WifiOn,
        PmuCommand::WifiOn => {
            if soc == SocState::WifiOff {
                soc = SocState::WifiOn
            }
        }
        PmuCommand::WifiOff => {
            if soc == SocState::WifiOn {
                soc = SocState::WifiOff
            }
        }
        PmuCommand::KillSoc => soc = SocState::Off,
        PmuCommand::SleepAll => {
            mcu = McuState::Off;
            soc = SocState::Off;
        }
    }
    CoreState { mcu, soc }
}
