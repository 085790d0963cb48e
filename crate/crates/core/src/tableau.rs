//! EPIRK-W coefficient tableaus.
//!
//! A tableau fixes the stage count `s`, the stage weights `a` and `b`, the
//! matrix-function scalings `g`, and the ψ combination coefficients `p`
//! with ψᵢⱼ(Z) = Σₖ p[i][j][k]·φₖ(Z). Coefficients are loaded from a TOML
//! document; the shipped third-order set lives in `data/epirkw3.toml` and
//! its order is validated empirically by the convergence tests.

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tableau {
    pub name: String,
    /// Stage count (s−1 internal stages plus the final update).
    pub s: usize,
    /// Claimed convergence order.
    pub order: usize,
    /// Ragged rows i = 1..s−1, row i holding a_{i,1..i}.
    a: Vec<Vec<f64>>,
    /// Final-stage weights b_1..b_s.
    b: Vec<f64>,
    /// s rows of s entries; rows 1..s−1 for internal stages, row s final.
    g: Vec<Vec<f64>>,
    /// p[i][j][k], all s×s×s, zeros where unused.
    p: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct TableauFile {
    name: String,
    s: usize,
    order: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    g: Vec<Vec<f64>>,
    p: Vec<Vec<Vec<f64>>>,
}

impl Tableau {
    /// Parses and validates a tableau from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TableauFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: "tableau".into(),
            message: e.to_string(),
        })?;
        let t = Tableau {
            name: file.name,
            s: file.s,
            order: file.order,
            a: file.a,
            b: file.b,
            g: file.g,
            p: file.p,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The third-order W-tableau shipped with the crate.
    pub fn third_order() -> Self {
        Self::from_toml_str(include_str!("../data/epirkw3.toml"))
            .expect("shipped tableau must parse")
    }

    fn validate(&self) -> Result<()> {
        let s = self.s;
        if s < 2 {
            return Err(Error::Tableau {
                field: "s",
                index: s.to_string(),
                message: "stage count must be at least 2".into(),
            });
        }
        if self.a.len() != s - 1 {
            return Err(Error::Tableau {
                field: "a",
                index: self.a.len().to_string(),
                message: format!("expected {} ragged rows", s - 1),
            });
        }
        for (i, row) in self.a.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Tableau {
                    field: "a",
                    index: format!("row {}", i + 1),
                    message: format!("expected {} entries, got {}", i + 1, row.len()),
                });
            }
        }
        if self.b.len() != s {
            return Err(Error::Tableau {
                field: "b",
                index: self.b.len().to_string(),
                message: format!("expected {s} entries"),
            });
        }
        if self.g.len() != s {
            return Err(Error::Tableau {
                field: "g",
                index: self.g.len().to_string(),
                message: format!("expected {s} rows"),
            });
        }
        for (i, row) in self.g.iter().enumerate() {
            if row.len() != s {
                return Err(Error::Tableau {
                    field: "g",
                    index: format!("row {}", i + 1),
                    message: format!("expected {s} entries, got {}", row.len()),
                });
            }
        }
        if self.p.len() != s {
            return Err(Error::Tableau {
                field: "p",
                index: self.p.len().to_string(),
                message: format!("expected {s} rows"),
            });
        }
        for (i, plane) in self.p.iter().enumerate() {
            if plane.len() != s {
                return Err(Error::Tableau {
                    field: "p",
                    index: format!("row {}", i + 1),
                    message: format!("expected {s} columns, got {}", plane.len()),
                });
            }
            for (j, coeffs) in plane.iter().enumerate() {
                if coeffs.len() != s {
                    return Err(Error::Tableau {
                        field: "p",
                        index: format!("[{},{}]", i + 1, j + 1),
                        message: format!("expected {s} coefficients, got {}", coeffs.len()),
                    });
                }
            }
        }
        for (name, values) in [
            ("a", self.a.iter().flatten()),
            ("g", self.g.iter().flatten()),
        ] {
            for (idx, v) in values.enumerate() {
                if !v.is_finite() {
                    return Err(Error::Tableau {
                        field: if name == "a" { "a" } else { "g" },
                        index: idx.to_string(),
                        message: "non-finite coefficient".into(),
                    });
                }
            }
        }
        if self
            .b
            .iter()
            .chain(self.p.iter().flatten().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Tableau {
                field: "b",
                index: "-".into(),
                message: "non-finite coefficient in b or p".into(),
            });
        }
        Ok(())
    }

    /// a_{i,j}, 1-based, i = 1..s−1, j ≤ i.
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i - 1][j - 1]
    }

    /// b_j, 1-based.
    pub fn b(&self, j: usize) -> f64 {
        self.b[j - 1]
    }

    /// g_{i,j}, 1-based; row s holds the final-stage scalings.
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.g[i - 1][j - 1]
    }

    /// ψ coefficient row p_{i,j,·}, 1-based in i and j.
    pub fn p_row(&self, i: usize, j: usize) -> &[f64] {
        &self.p[i - 1][j - 1]
    }
}

/// Forward-difference expansion coefficient C_{ℓ,j} = (−1)^ℓ·binom(j−1, ℓ).
pub fn fd_coefficient(l: usize, j: usize) -> Result<i64> {
    if j == 0 || l > j - 1 {
        return Err(Error::FdIndex { l, j });
    }
    let mut binom: i64 = 1;
    for i in 0..l {
        binom = binom * (j - 1 - i) as i64 / (i + 1) as i64;
    }
    Ok(if l % 2 == 0 { binom } else { -binom })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_coefficient_closed_form() {
        assert_eq!(fd_coefficient(0, 2).unwrap(), 1);
        assert_eq!(fd_coefficient(1, 2).unwrap(), -1);
        assert_eq!(fd_coefficient(0, 3).unwrap(), 1);
        assert_eq!(fd_coefficient(1, 3).unwrap(), -2);
        assert_eq!(fd_coefficient(2, 3).unwrap(), 1);
    }

    #[test]
    fn fd_coefficient_rows_sum_to_zero() {
        for j in 2..=6 {
            let sum: i64 = (0..j).map(|l| fd_coefficient(l, j).unwrap()).sum();
            assert_eq!(sum, 0, "row j={j}");
        }
    }

    #[test]
    fn fd_coefficient_rejects_out_of_range() {
        assert!(fd_coefficient(2, 2).is_err());
        assert!(fd_coefficient(0, 0).is_err());
    }

    #[test]
    fn shipped_tableau_parses() {
        let t = Tableau::third_order();
        assert_eq!(t.s, 3);
        assert_eq!(t.order, 3);
        assert_eq!(t.b(1), 1.0);
    }

    #[test]
    fn parse_error_names_field_and_index() {
        let bad = r#"
name = "broken"
s = 3
order = 3
a = [[0.5]]
b = [1.0, 2.0, 1.0]
g = [[0.5,0,0],[1,1,0],[1,1,1]]
p = [[[1,0,0],[0,0,0],[0,0,0]],[[1,0,0],[1,0,0],[0,0,0]],[[1,0,0],[0,1,0],[0,0,1]]]
"#;
        match Tableau::from_toml_str(bad) {
            Err(Error::Tableau { field, .. }) => assert_eq!(field, "a"),
            other => panic!("expected tableau error, got {other:?}"),
        }
    }
}
