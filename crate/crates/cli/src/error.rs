use std::fmt;

/// Command-level failures that have no library counterpart.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),
}

/// Broad failure classes, each with its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal,
    Usage,
    Config,
    Input,
    Checkpoint,
    Numerical,
    Io,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Input => 4,
            Category::Checkpoint => 5,
            Category::Numerical => 6,
            Category::Io => 7,
        }
    }

    pub fn of(err: &anyhow::Error) -> Category {
        use puie_core::Error as E;
        for cause in err.chain() {
            if let Some(e) = cause.downcast_ref::<CliError>() {
                return match e {
                    CliError::Config(_) => Category::Config,
                    CliError::Usage(_) => Category::Usage,
                    CliError::Input(_) => Category::Input,
                };
            }
            if let Some(e) = cause.downcast_ref::<E>() {
                return match e {
                    E::Checkpoint(_) => Category::Checkpoint,
                    E::NonFinite(_) => Category::Numerical,
                    E::Io(_) => Category::Io,
                    E::InvalidArgument(_) | E::ExtractorUnavailable(_) => Category::Config,
                    E::Dataset(_) | E::Image { .. } | E::Shape(_) | E::Dimension { .. } | E::Empty(_) => {
                        Category::Input
                    }
                    E::Json(_) => Category::Input,
                };
            }
            if cause.downcast_ref::<std::io::Error>().is_some() {
                return Category::Io;
            }
        }
        Category::Internal
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Input => "input",
            Category::Checkpoint => "checkpoint",
            Category::Numerical => "numerical",
            Category::Io => "io",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_follow_the_root_error() {
        let e = anyhow::Error::new(puie_core::Error::Checkpoint("x".into())).context("loading");
        assert_eq!(Category::of(&e), Category::Checkpoint);
        let e = anyhow::Error::new(CliError::Config("bad".into()));
        assert_eq!(Category::of(&e).exit_code(), 3);
        assert_eq!(Category::of(&anyhow::anyhow!("boom")), Category::Internal);
    }
}
