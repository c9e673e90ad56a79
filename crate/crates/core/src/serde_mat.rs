//! Row-major nested-array (de)serialization for nalgebra matrices and vectors.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod vector_vec {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        vs.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let all = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(all.into_iter().map(DVector::from_vec).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct TrajRepr {
    grid: crate::numerics::TimeGrid,
    values: Vec<Vec<f64>>,
}

fn traj_repr(t: &crate::numerics::Trajectory<DVector<f64>>) -> TrajRepr {
    TrajRepr {
        grid: t.grid,
        values: t.values.iter().map(|v| v.as_slice().to_vec()).collect(),
    }
}

fn traj_from(r: TrajRepr) -> crate::numerics::Trajectory<DVector<f64>> {
    crate::numerics::Trajectory {
        grid: r.grid,
        values: r.values.into_iter().map(DVector::from_vec).collect(),
    }
}

pub mod trajectory {
    use super::*;
    use crate::numerics::Trajectory;

    pub fn serialize<S: Serializer>(t: &Trajectory<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        traj_repr(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Trajectory<DVector<f64>>, D::Error> {
        Ok(traj_from(TrajRepr::deserialize(d)?))
    }
}

pub mod trajectory_vec {
    use super::*;
    use crate::numerics::Trajectory;

    pub fn serialize<S: Serializer>(ts: &[Trajectory<DVector<f64>>], s: S) -> Result<S::Ok, S::Error> {
        ts.iter().map(traj_repr).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Trajectory<DVector<f64>>>, D::Error> {
        Ok(Vec::<TrajRepr>::deserialize(d)?.into_iter().map(traj_from).collect())
    }
}
