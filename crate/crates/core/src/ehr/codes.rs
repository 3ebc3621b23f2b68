use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! code_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

code_id!(
    /// Identifier of a fine-grained ICD diagnosis code, e.g. `ICD:428.0`.
    IcdId
);
code_id!(
    /// Identifier of a CCS diagnosis category. CCS codes are the prediction space.
    CcsId
);

/// An ICD code with its display name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IcdCode {
    pub id: IcdId,
    pub name: String,
}

/// A CCS category with its display name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CcsCode {
    pub id: CcsId,
    pub name: String,
}
