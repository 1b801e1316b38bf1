//! Exponential-moving-average teacher update.

use dinomx_core::vit::ParameterSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmaError {
    #[error("parameter name sets differ: teacher-only {teacher_only:?}, student-only {student_only:?}")]
    NameSetMismatch {
        teacher_only: Vec<String>,
        student_only: Vec<String>,
    },
}

/// `theta_t <- m * theta_t + (1 - m) * theta_s`, elementwise over every
/// matched tensor. Implemented in the fused form
/// `theta_t + (1 - m) * (theta_s - theta_t)` so `theta_s == theta_t` is a
/// bit-exact fixed point for any momentum.
pub fn ema_update(teacher: &mut ParameterSet, student: &ParameterSet, m: f64) -> Result<(), EmaError> {
    if teacher.len() != student.len() || !teacher.keys().eq(student.keys()) {
        let teacher_only: Vec<String> = teacher
            .keys()
            .filter(|k| !student.contains_key(*k))
            .cloned()
            .collect();
        let student_only: Vec<String> = student
            .keys()
            .filter(|k| !teacher.contains_key(*k))
            .cloned()
            .collect();
        return Err(EmaError::NameSetMismatch {
            teacher_only,
            student_only,
        });
    }
    let one_minus = 1.0 - m;
    for (name, t) in teacher.iter_mut() {
        let s = &student[name];
        debug_assert_eq!(t.shape(), s.shape());
        let td = t.data_mut();
        for (ti, &si) in td.iter_mut().zip(s.data()) {
            let tv = *ti as f64;
            *ti = (tv + one_minus * (si as f64 - tv)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dinomx_core::tensor::Tensor;

    fn set(pairs: &[(&str, Vec<f32>)]) -> ParameterSet {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn momentum_one_keeps_teacher_bit_exact() {
        let mut teacher = set(&[("w", vec![0.123456, -9.5])]);
        let student = set(&[("w", vec![100.0, 100.0])]);
        let before = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher["w"].data(), before["w"].data());
    }

    #[test]
    fn momentum_zero_copies_student_bit_exact() {
        let mut teacher = set(&[("w", vec![0.25, -0.75])]);
        let student = set(&[("w", vec![1.5, 2.5])]);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher["w"].data(), student["w"].data());
    }

    #[test]
    fn midpoint_arithmetic() {
        let mut teacher = set(&[("w", vec![0.0])]);
        let student = set(&[("w", vec![2.0])]);
        ema_update(&mut teacher, &student, 0.5).unwrap();
        assert_eq!(teacher["w"].data(), &[1.0]);
    }

    #[test]
    fn fixed_point_for_any_momentum() {
        let values = vec![0.1, -1e20, 3.5e-12, 7.0];
        let mut teacher = set(&[("w", values.clone())]);
        let student = set(&[("w", values.clone())]);
        for m in [0.0, 0.5, 0.996, 0.9999] {
            ema_update(&mut teacher, &student, m).unwrap();
            assert_eq!(teacher["w"].data(), &values[..]);
        }
    }

    #[test]
    fn name_set_mismatch_is_an_error() {
        let mut teacher = set(&[("a", vec![0.0])]);
        let student = set(&[("b", vec![0.0])]);
        assert!(matches!(
            ema_update(&mut teacher, &student, 0.5),
            Err(EmaError::NameSetMismatch { .. })
        ));
    }
}
