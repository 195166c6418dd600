use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Image-level label. `Abnormal` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Normal,
    Abnormal,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Normal, Class::Abnormal];

    pub fn index(self) -> usize {
        match self {
            Class::Normal => 0,
            Class::Abnormal => 1,
        }
    }

    pub fn from_label(y: u8) -> Result<Self, Error> {
        match y {
            0 => Ok(Class::Normal),
            1 => Ok(Class::Abnormal),
            other => Err(Error::Domain(format!("unknown class label {other}"))),
        }
    }

    pub fn label(self) -> u8 {
        self.index() as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "normal" | "0" => Ok(Class::Normal),
            "abnormal" | "1" => Ok(Class::Abnormal),
            other => Err(Error::Domain(format!("unknown class `{other}`"))),
        }
    }
}
