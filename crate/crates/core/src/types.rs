use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Binary hatefulness class. Serialized as the integer `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    NotHateful,
    Hateful,
}

impl Class {
    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            0 => Some(Class::NotHateful),
            1 => Some(Class::Hateful),
            _ => None,
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            Class::NotHateful => 0,
            Class::Hateful => 1,
        }
    }

    pub fn is_hateful(self) -> bool {
        self == Class::Hateful
    }

    pub fn flip(self) -> Self {
        match self {
            Class::NotHateful => Class::Hateful,
            Class::Hateful => Class::NotHateful,
        }
    }
}

impl Serialize for Class {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for Class {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Class::from_int(v).ok_or_else(|| serde::de::Error::custom(format!("label {v} is not 0 or 1")))
    }
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $kw),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.to_ascii_lowercase().as_str() {
                    $($kw => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name).to_ascii_lowercase(),
                        other,
                        [$($kw),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(
    /// Prompting strategy: plain question, or question plus hate taxonomy.
    PromptKind { Simple => "simple", Category => "category" }
);

keyword_enum!(
    /// Output format the model is asked for.
    LabelKind { Binary => "binary", Scale => "scale" }
);

keyword_enum!(
    /// Whether the image is attached to the request.
    Modality { Multimodal => "multimodal", TextOnly => "text_only" }
);
