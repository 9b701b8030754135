//! ASCII PLY export of geometric changes between two steps: primitives added
//! between the steps are green points, removed ones red.

use crate::scene::{FieldError, GaussianField};

/// Point cloud of the changes from `step_a` to `step_b` as an ASCII PLY
/// document. Equal steps yield an empty vertex list.
pub fn changes_ply(field: &GaussianField, step_a: u32, step_b: u32) -> Result<String, FieldError> {
    let at_a = field.active_indices(step_a)?;
    let at_b = field.active_indices(step_b)?;
    let set_a: std::collections::HashSet<usize> = at_a.iter().copied().collect();
    let set_b: std::collections::HashSet<usize> = at_b.iter().copied().collect();
    let added: Vec<usize> = at_b.iter().copied().filter(|i| !set_a.contains(i)).collect();
    let removed: Vec<usize> = at_a.iter().copied().filter(|i| !set_b.contains(i)).collect();

    let mut out = String::new();
    out.push_str("ply\n");
    out.push_str("format ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", added.len() + removed.len()));
    out.push_str("property float x\n");
    out.push_str("property float y\n");
    out.push_str("property float z\n");
    out.push_str("property uchar red\n");
    out.push_str("property uchar green\n");
    out.push_str("property uchar blue\n");
    out.push_str("end_header\n");
    for &i in &added {
        let p = field.primitives[i].position;
        out.push_str(&format!("{} {} {} 0 255 0\n", p.x as f32, p.y as f32, p.z as f32));
    }
    for &i in &removed {
        let p = field.primitives[i].position;
        out.push_str(&format!("{} {} {} 255 0 0\n", p.x as f32, p.y as f32, p.z as f32));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceModel;
    use crate::scene::{Gaussian, Origin, VisibilityPool};
    use nalgebra::Vector3;

    fn two_step_field() -> GaussianField {
        let mut pool = VisibilityPool::default();
        let mut prims = Vec::new();
        for i in 0..4 {
            prims.push(Gaussian::new(Vector3::new(i as f64, 0.0, 0.0), 1));
            pool.push(0, Origin::Initial);
        }
        let mut field = GaussianField {
            primitives: prims,
            appearance: AppearanceModel::disabled(1),
            pool,
            time_records: Vec::new(),
            current_step: 0,
            sh_degree: 1,
            scene_extent: 4.0,
        };
        field.append_step(Vec::new());
        field.append_step(Vec::new());
        // Remove prim 1 at step 1; add prim 4 at step 1.
        field.pool.deactivate(1, 1);
        field.primitives.push(Gaussian::new(Vector3::new(9.0, 9.0, 9.0), 1));
        field.pool.push(1, Origin::AddedAtStep(1));
        field
    }

    /// Minimal PLY header parse: element count and property list.
    fn parse_ply(text: &str) -> (usize, Vec<(f32, f32, f32, u8, u8, u8)>) {
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("ply"));
        assert_eq!(lines.next(), Some("format ascii 1.0"));
        let element = lines.next().unwrap();
        let count: usize = element.strip_prefix("element vertex ").unwrap().parse().unwrap();
        let props: Vec<&str> = (0..6).map(|_| lines.next().unwrap()).collect();
        assert_eq!(
            props,
            vec![
                "property float x",
                "property float y",
                "property float z",
                "property uchar red",
                "property uchar green",
                "property uchar blue"
            ]
        );
        assert_eq!(lines.next(), Some("end_header"));
        let verts = lines
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                (
                    f[0].parse().unwrap(),
                    f[1].parse().unwrap(),
                    f[2].parse().unwrap(),
                    f[3].parse().unwrap(),
                    f[4].parse().unwrap(),
                    f[5].parse().unwrap(),
                )
            })
            .collect::<Vec<_>>();
        (count, verts)
    }

    #[test]
    fn equal_steps_give_empty_cloud() {
        let field = two_step_field();
        let ply = changes_ply(&field, 1, 1).unwrap();
        let (count, verts) = parse_ply(&ply);
        assert_eq!(count, 0);
        assert!(verts.is_empty());
    }

    #[test]
    fn added_green_removed_red() {
        let field = two_step_field();
        let ply = changes_ply(&field, 0, 1).unwrap();
        let (count, verts) = parse_ply(&ply);
        assert_eq!(count, 2);
        assert_eq!(verts.len(), 2);
        let green: Vec<_> = verts.iter().filter(|v| v.4 == 255 && v.3 == 0).collect();
        let red: Vec<_> = verts.iter().filter(|v| v.3 == 255 && v.4 == 0).collect();
        assert_eq!(green.len(), 1);
        assert_eq!(red.len(), 1);
        assert_eq!(green[0].0, 9.0);
        assert_eq!(red[0].0, 1.0);
    }
}
