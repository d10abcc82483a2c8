//! Results database: one SQLite file, one row per `log.result` call.

use std::path::Path;
use std::rc::Rc;

use blockforge_script::{ResultSink, ResultValue};
use rusqlite::types::{ToSqlOutput, Value, ValueRef};
use rusqlite::{params, Connection, ErrorCode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("result {name:?} already recorded for run {run_id} at step {step}")]
    Duplicate { run_id: i64, step: u64, name: String },
    #[error("results database: {0}")]
    Sql(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub run_id: i64,
    pub step: u64,
    pub name: String,
    pub value: ResultValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run_id: i64,
    pub scenario: String,
    pub started_at: String,
    pub config_text: String,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS runs (
    run_id INTEGER PRIMARY KEY,
    scenario TEXT NOT NULL,
    started_at TEXT NOT NULL,
    config_text TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS results (
    run_id INTEGER NOT NULL REFERENCES runs(run_id),
    step INTEGER NOT NULL,
    name TEXT NOT NULL,
    value,
    PRIMARY KEY (run_id, step, name)
);
";

pub struct ResultStore {
    conn: Connection,
}

fn value_sql(v: &ResultValue) -> ToSqlOutput<'_> {
    match v {
        // SQLite turns NaN into NULL; read_value maps it back
        ResultValue::Real(x) if x.is_nan() => ToSqlOutput::Owned(Value::Null),
        ResultValue::Real(x) => ToSqlOutput::Owned(Value::Real(*x)),
        ResultValue::Text(s) => ToSqlOutput::Borrowed(ValueRef::Text(s.as_bytes())),
    }
}

fn read_value(v: ValueRef<'_>) -> ResultValue {
    match v {
        ValueRef::Real(x) => ResultValue::Real(x),
        ValueRef::Integer(i) => ResultValue::Real(i as f64),
        ValueRef::Null => ResultValue::Real(f64::NAN),
        ValueRef::Text(t) | ValueRef::Blob(t) => ResultValue::Text(String::from_utf8_lossy(t).into_owned()),
    }
}

impl ResultStore {
    /// Opens or creates the database file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        // every insert commits on its own; WAL keeps that cheap
        conn.pragma_update(None, "journal_mode", "WAL").or_else(|e| match e {
            rusqlite::Error::ExecuteReturnedResults => Ok(()),
            e => Err(e),
        })?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    pub fn begin_run(&self, scenario: &str, started_at: &str, config_text: &str) -> Result<i64, StoreError> {
        self.conn.execute(
            "INSERT INTO runs (scenario, started_at, config_text) VALUES (?1, ?2, ?3)",
            params![scenario, started_at, config_text],
        )?;
        Ok(self.conn.last_insert_rowid())
    }

    pub fn record(&self, rec: &ResultRecord) -> Result<(), StoreError> {
        let r = self.conn.execute(
            "INSERT INTO results (run_id, step, name, value) VALUES (?1, ?2, ?3, ?4)",
            params![rec.run_id, rec.step as i64, rec.name, value_sql(&rec.value)],
        );
        match r {
            Ok(_) => Ok(()),
            Err(rusqlite::Error::SqliteFailure(e, _)) if e.code == ErrorCode::ConstraintViolation => {
                Err(StoreError::Duplicate {
                    run_id: rec.run_id,
                    step: rec.step,
                    name: rec.name.clone(),
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Records of one run ordered by step, then name.
    pub fn results(&self, run_id: i64) -> Result<Vec<ResultRecord>, StoreError> {
        let mut q = self
            .conn
            .prepare("SELECT step, name, value FROM results WHERE run_id = ?1 ORDER BY step, name")?;
        let rows = q.query_map([run_id], |r| {
            Ok(ResultRecord {
                run_id,
                step: r.get::<_, i64>(0)? as u64,
                name: r.get(1)?,
                value: read_value(r.get_ref(2)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn runs(&self) -> Result<Vec<RunRow>, StoreError> {
        let mut q = self
            .conn
            .prepare("SELECT run_id, scenario, started_at, config_text FROM runs ORDER BY run_id")?;
        let rows = q.query_map([], |r| {
            Ok(RunRow {
                run_id: r.get(0)?,
                scenario: r.get(1)?,
                started_at: r.get(2)?,
                config_text: r.get(3)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }
}

/// Sink for one run, handed to the root interpreter.
pub struct RunSink {
    pub store: Rc<ResultStore>,
    pub run_id: i64,
}

impl ResultSink for RunSink {
    fn record(&self, step: u64, name: &str, value: &ResultValue) -> Result<(), String> {
        self.store
            .record(&ResultRecord {
                run_id: self.run_id,
                step,
                name: name.to_string(),
                value: value.clone(),
            })
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaced_result_name_round_trips() {
        let s = ResultStore::in_memory().unwrap();
        let run = s.begin_run("channel.rhai", "2000-01-01T00:00:00Z", "{}").unwrap();
        let rec = ResultRecord {
            run_id: run,
            step: 100,
            name: "Max X Vel".into(),
            value: ResultValue::Real(0.03),
        };
        s.record(&rec).unwrap();
        assert_eq!(s.results(run).unwrap(), vec![rec.clone()]);
        assert!(matches!(s.record(&rec), Err(StoreError::Duplicate { .. })));
        let text = ResultRecord {
            name: "note".into(),
            value: ResultValue::Text("ok".into()),
            ..rec
        };
        s.record(&text).unwrap();
        assert_eq!(s.results(run).unwrap()[1].value, ResultValue::Text("ok".into()));
    }
}
