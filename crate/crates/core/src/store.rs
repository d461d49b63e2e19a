//! Policy store: named machine-policy parameter vectors kept as CSV.
//!
//! The shipped table covers the batched click-counter policies for
//! `n_R in {2, 8, 12, 20}`, initial frequency spreads `{2, 10, 20}` and the
//! readout-error variants. Ids follow `mach_u_<n_R>_<sigma>[_re]`.
//!
//! Besides store rows, [`resolve_policy`] understands `man`, `rand` and
//! `mach_c_<...>` (a store row with a shaped waiting-time density).

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::{MachinePolicyParams, Policy, ShapedTimeDensity, MACHINE_REPEATS};

const BUILTIN: &str = include_str!("../data/policies.csv");

pub const HEADER: &str = "policy_id,a,b,d,f,g_pol,t_max,D_th,C_0";

/// Environment variable overriding the on-disk store path.
pub const STORE_ENV: &str = "QEST_POLICY_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy_id: String,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub f: f64,
    pub g_pol: f64,
    pub t_max: f64,
    #[serde(rename = "D_th")]
    pub d_th: u32,
    #[serde(rename = "C_0")]
    pub c0: u32,
}

impl PolicyRecord {
    pub fn new(policy_id: impl Into<String>, p: &MachinePolicyParams) -> Self {
        Self {
            policy_id: policy_id.into(),
            a: p.a,
            b: p.b,
            d: p.d,
            f: p.f,
            g_pol: p.g_pol,
            t_max: p.t_max,
            d_th: p.d_th,
            c0: p.c0,
        }
    }

    pub fn params(&self) -> MachinePolicyParams {
        MachinePolicyParams {
            a: self.a,
            b: self.b,
            d: self.d,
            f: self.f,
            g_pol: self.g_pol,
            t_max: self.t_max,
            d_th: self.d_th,
            c0: self.c0,
        }
    }

    pub fn is_builtin(&self) -> bool {
        PolicyStore::builtin().get(&self.policy_id).is_some_and(|b| b == self)
    }
}

/// Shortest text that parses back to `x`, padded to two decimals when the
/// value has at most two (so tabulated `0.00` stays `0.00`).
pub fn format_value(x: f64) -> String {
    let cents = (x * 100.0).round();
    if cents.abs() < 1e15 && cents / 100.0 == x {
        format!("{x:.2}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyStore {
    records: Vec<PolicyRecord>,
}

impl PolicyStore {
    pub fn builtin() -> Self {
        Self::read_csv(BUILTIN.as_bytes()).expect("shipped policy table parses")
    }

    /// Store at `path`, or the built-in table when the file does not exist.
    pub fn load_or_builtin(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::read_csv(fs::File::open(path)?)
        } else {
            Ok(Self::builtin())
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.iter().collect::<Vec<_>>().join(",");
        if headers != HEADER {
            return Err(Error::Format(format!(
                "policy store header `{headers}`, expected `{HEADER}`"
            )));
        }
        let mut store = Self::default();
        for row in r.deserialize() {
            store.insert(row?)?;
        }
        Ok(store)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.policy_id,
                format_value(r.a),
                format_value(r.b),
                format_value(r.d),
                format_value(r.f),
                format_value(r.g_pol),
                format_value(r.t_max),
                r.d_th,
                r.c0
            );
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn records(&self) -> &[PolicyRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.policy_id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&PolicyRecord> {
        self.records.iter().find(|r| r.policy_id == id)
    }

    pub fn insert(&mut self, record: PolicyRecord) -> Result<()> {
        if record.policy_id.is_empty() || record.policy_id.contains([',', '\n', '"']) {
            return Err(Error::InvalidConfig(format!("bad policy id `{}`", record.policy_id)));
        }
        if self.get(&record.policy_id).is_some() {
            return Err(Error::DuplicatePolicy(record.policy_id));
        }
        record.params().validate(MACHINE_REPEATS)?;
        self.records.push(record);
        Ok(())
    }

    /// Every id [`resolve_policy`] accepts without extra inputs.
    pub fn available(&self) -> Vec<String> {
        let mut ids = vec!["man".to_string(), "rand".to_string()];
        ids.extend(self.ids().map(str::to_string));
        ids
    }
}

/// Turns a policy id into a runnable [`Policy`].
///
/// `mach_c_<key>` uses the parameters of `mach_u_<key>` and needs `density`;
/// its grid must end at or before that row's `t_max`.
pub fn resolve_policy(
    id: &str,
    store: &PolicyStore,
    density: Option<&ShapedTimeDensity>,
) -> Result<Policy> {
    let unknown = || Error::UnknownPolicy { id: id.to_string(), available: store.available().join(", ") };
    let policy = match id {
        "man" => Policy::manual(),
        "rand" => Policy::random(),
        _ => {
            if let Some(key) = id.strip_prefix("mach_c_") {
                let row = store.get(&format!("mach_u_{key}")).ok_or_else(unknown)?;
                let density = density.ok_or_else(|| {
                    Error::InvalidConfig(format!("policy `{id}` needs a shaped density file"))
                })?;
                Policy::machine_shaped(row.params(), density.clone())
            } else {
                Policy::machine(store.get(id).ok_or_else(unknown)?.params())
            }
        }
    };
    policy.validate()?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::TimeTail;
    use proptest::prelude::*;

    #[test]
    fn builtin_table_has_sixteen_rows() {
        let store = PolicyStore::builtin();
        assert_eq!(store.records().len(), 16);
        let row = store.get("mach_u_12_10").unwrap();
        assert_eq!(
            (row.a, row.b, row.d, row.f, row.g_pol, row.t_max, row.d_th, row.c0),
            (4.57, 0.00, 1.76, 4.74, 1.48, 52.78, 7, 159)
        );
        let row = store.get("mach_u_20_2").unwrap();
        assert_eq!(
            (row.a, row.b, row.d, row.f, row.g_pol, row.t_max, row.d_th, row.c0),
            (7.49, 3.11, 1.44, 4.96, 5.98, 94.25, 6, 129)
        );
        assert!(row.is_builtin());
    }

    #[test]
    fn reserializing_reproduces_the_shipped_file() {
        assert_eq!(PolicyStore::builtin().to_csv_string(), BUILTIN);
    }

    #[test]
    fn duplicate_and_invalid_rows_are_rejected() {
        let mut store = PolicyStore::builtin();
        let dup = store.get("mach_u_2_2").unwrap().clone();
        assert!(matches!(store.insert(dup.clone()), Err(Error::DuplicatePolicy(_))));
        let bad = PolicyRecord { policy_id: "x".into(), d_th: 11, ..dup };
        assert!(store.insert(bad).is_err());
    }

    #[test]
    fn resolve_known_and_unknown_ids() {
        let store = PolicyStore::builtin();
        assert!(matches!(resolve_policy("man", &store, None).unwrap(), Policy::Manual(_)));
        assert!(matches!(resolve_policy("rand", &store, None).unwrap(), Policy::Random { .. }));
        match resolve_policy("mach_u_20_2", &store, None).unwrap() {
            Policy::Machine { params, tail, .. } => {
                assert_eq!(params.t_max, 94.25);
                assert_eq!(tail, TimeTail::Uniform);
            }
            other => panic!("{other:?}"),
        }
        match resolve_policy("nope", &store, None) {
            Err(Error::UnknownPolicy { available, .. }) => assert!(available.contains("mach_u_8_2_re")),
            other => panic!("{other:?}"),
        }
        assert!(resolve_policy("mach_c_20_2", &store, None).is_err());
        let grid = crate::policies::build_time_grid(16, 62.83, 94.25).unwrap();
        let dens = ShapedTimeDensity::uniform(grid).unwrap();
        assert!(matches!(
            resolve_policy("mach_c_20_2", &store, Some(&dens)).unwrap(),
            Policy::Machine { tail: TimeTail::Shaped(_), .. }
        ));
    }

    proptest! {
        #[test]
        fn store_roundtrips_arbitrary_values(
            vals in proptest::collection::vec(0.0f64..200.0, 6), d_th in 0u32..=10, c0 in 0u32..500,
        ) {
            let params = MachinePolicyParams {
                a: vals[0], b: vals[1], d: vals[2], f: vals[3], g_pol: vals[4],
                t_max: vals[5] + 0.1, d_th, c0,
            };
            let mut store = PolicyStore::builtin();
            store.insert(PolicyRecord::new("learned", &params)).unwrap();
            let text = store.to_csv_string();
            let back = PolicyStore::read_csv(text.as_bytes()).unwrap();
            prop_assert_eq!(&back, &store);
            prop_assert_eq!(back.to_csv_string(), text);
        }
    }
}
