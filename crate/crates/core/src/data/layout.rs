use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Surface,
    Atmospheric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
}

/// Pressure levels in hPa, ordered from the model top toward the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelSet {
    pressures: Vec<f64>,
}

impl LevelSet {
    pub fn new(pressures: Vec<f64>) -> Result<Self> {
        if pressures.is_empty() {
            return Err(Error::InvalidParameter("level set is empty".into()));
        }
        if pressures.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter(
                "pressures must be positive and finite".into(),
            ));
        }
        if pressures.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "pressures must increase strictly toward the surface".into(),
            ));
        }
        Ok(Self { pressures })
    }

    /// Level set that may contain repeated pressures (used to illustrate
    /// how cloned levels are weighted). Positivity is still enforced.
    pub fn with_duplicates(pressures: Vec<f64>) -> Result<Self> {
        if pressures.is_empty() || pressures.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidParameter("pressures must be positive".into()));
        }
        Ok(Self { pressures })
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressures
    }

    /// Number of three-dimensional levels `N_k`.
    pub fn len(&self) -> usize {
        self.pressures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pressures.is_empty()
    }

    /// Pressure of level `k` in `1..=N_k`; level 0 (surface) has none.
    pub fn pressure(&self, k: usize) -> Option<f64> {
        if k == 0 {
            None
        } else {
            self.pressures.get(k - 1).copied()
        }
    }

    /// The toy atmosphere's eight levels.
    pub fn toy() -> Self {
        Self::new(vec![50.0, 100.0, 200.0, 300.0, 500.0, 700.0, 850.0, 1000.0]).unwrap()
    }

    /// The 37 standard pressure levels.
    pub fn standard37() -> Self {
        Self::new(vec![
            1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0, 125.0, 150.0, 175.0,
            200.0, 225.0, 250.0, 300.0, 350.0, 400.0, 450.0, 500.0, 550.0, 600.0, 650.0, 700.0,
            750.0, 775.0, 800.0, 825.0, 850.0, 875.0, 900.0, 925.0, 950.0, 975.0, 1000.0,
        ])
        .unwrap()
    }
}

impl TryFrom<Vec<f64>> for LevelSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LevelSet::new(v)
    }
}

impl From<LevelSet> for Vec<f64> {
    fn from(l: LevelSet) -> Self {
        l.pressures
    }
}

/// One (variable, level) slice of a field state; surface variables use level 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub var: usize,
    pub level: usize,
}

/// Variables and levels of a system, and the channel ordering derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub variables: Vec<Variable>,
    pub levels: LevelSet,
}

impl Layout {
    pub fn new(variables: Vec<Variable>, levels: LevelSet) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::InvalidParameter("layout has no variables".into()));
        }
        let mut names: Vec<&str> = variables.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate variable name".into()));
        }
        Ok(Self { variables, levels })
    }

    /// Three atmospheric variables on the toy levels plus two surface variables.
    pub fn toy() -> Self {
        let var = |name: &str, kind| Variable {
            name: name.into(),
            kind,
        };
        Self::new(
            vec![
                var("mass", VarKind::Atmospheric),
                var("temperature", VarKind::Atmospheric),
                var("humidity", VarKind::Atmospheric),
                var("t2m", VarKind::Surface),
                var("msl", VarKind::Surface),
            ],
            LevelSet::toy(),
        )
        .unwrap()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Channels in storage order: variables in declaration order, each over
    /// its own levels (0 for surface, `1..=N_k` for atmospheric).
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        for (var, v) in self.variables.iter().enumerate() {
            match v.kind {
                VarKind::Surface => out.push(Channel { var, level: 0 }),
                VarKind::Atmospheric => {
                    out.extend((1..=self.n_levels()).map(|level| Channel { var, level }))
                }
            }
        }
        out
    }

    pub fn n_channels(&self) -> usize {
        self.variables
            .iter()
            .map(|v| match v.kind {
                VarKind::Surface => 1,
                VarKind::Atmospheric => self.n_levels(),
            })
            .sum()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn channel_index(&self, var: usize, level: usize) -> Option<usize> {
        self.channels()
            .iter()
            .position(|c| c.var == var && c.level == level)
    }

    pub fn channel_by_name(&self, name: &str, level: usize) -> Result<usize> {
        let var = self
            .var_index(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variable {name}")))?;
        self.channel_index(var, level).ok_or_else(|| {
            Error::InvalidParameter(format!("variable {name} has no level {level}"))
        })
    }

    /// Human-readable level label: "surface" or the pressure in hPa.
    pub fn level_label(&self, level: usize) -> String {
        match self.levels.pressure(level) {
            Some(p) => format!("{p}"),
            None => "surface".to_string(),
        }
    }

    pub fn atmospheric_vars(&self) -> impl Iterator<Item = usize> + '_ {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Atmospheric)
            .map(|(i, _)| i)
    }
}
