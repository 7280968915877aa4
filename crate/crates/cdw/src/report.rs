use serde::Serialize;

/// One named identity checked by a verifier.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Outcome of a verifier: a list of checks, failures included.
#[derive(Clone, Debug, Default, Serialize, PartialEq, Eq)]
pub struct Report {
    pub subject: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(subject: impl Into<String>) -> Report {
        Report { subject: subject.into(), checks: Vec::new() }
    }

    pub fn check(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) -> bool {
        self.checks.push(Check { name: name.into(), ok, detail: if ok { String::new() } else { detail.into() } });
        ok
    }

    /// Records a failure only; successful identities are folded into a single
    /// summary line by [`Report::summarize`].
    pub fn fail(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), ok: false, detail: detail.into() });
    }

    pub fn summarize(&mut self, name: impl Into<String>, total: usize) {
        let name = name.into();
        if !self.checks.iter().any(|c| !c.ok && c.name == name) {
            self.checks.push(Check { name, ok: true, detail: format!("{total} checked") });
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.ok)
    }

    pub fn merge(&mut self, other: Report) {
        for mut c in other.checks {
            c.name = format!("{}/{}", other.subject, c.name);
            self.checks.push(c);
        }
    }
}
