use super::DetectorGeometry;
use crate::bbox::BBox;
use crate::data::ObjectLabel;

/// Training targets of one image at one scale. Grids are row-major over
/// cells; slot-indexed grids are `(cell, slot)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub grid: usize,
    /// Objectness target per `(cell, slot)`.
    pub obj: Vec<f64>,
    /// Class target per `(cell, class)`.
    pub cls: Vec<f64>,
    /// Box target per `(cell, slot)`.
    pub boxes: Vec<Option<BBox>>,
    /// Cells responsible for at least one object.
    pub responsible: Vec<bool>,
}

impl ScaleTargets {
    /// Number of responsible slots in a cell.
    pub fn slots_in(&self, cell: usize) -> usize {
        let m = self.boxes.len() / self.responsible.len();
        self.boxes[cell * m..(cell + 1) * m].iter().flatten().count()
    }
}

/// Targets of one image at all three scales.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub scales: [ScaleTargets; 3],
}

impl TargetAssignment {
    pub fn has_objects(&self) -> bool {
        self.scales[0].responsible.iter().any(|&r| r)
    }
}

/// Makes the cell containing each box center responsible for it at every
/// scale. When more than `M` boxes share a cell, larger areas win, then
/// lower class ids.
pub fn assign_targets(labels: &[ObjectLabel], geom: &DetectorGeometry) -> TargetAssignment {
    let mut order: Vec<&ObjectLabel> = labels.iter().collect();
    order.sort_by(|a, b| {
        b.bbox
            .area()
            .total_cmp(&a.bbox.area())
            .then(a.class.cmp(&b.class))
    });
    let scale = |s: usize| {
        let g = geom.grid(s);
        let cells = g * g;
        let mut t = ScaleTargets {
            grid: g,
            obj: vec![0.0; cells * geom.m],
            cls: vec![0.0; cells * geom.c],
            boxes: vec![None; cells * geom.m],
            responsible: vec![false; cells],
        };
        for l in &order {
            let (cx, cy) = l.bbox.center();
            let col = ((cx * g as f64) as usize).min(g - 1);
            let row = ((cy * g as f64) as usize).min(g - 1);
            let cell = row * g + col;
            let Some(slot) = (0..geom.m).find(|&m| t.boxes[cell * geom.m + m].is_none()) else {
                continue;
            };
            t.boxes[cell * geom.m + slot] = Some(l.bbox);
            t.obj[cell * geom.m + slot] = 1.0;
            if l.class < geom.c {
                t.cls[cell * geom.c + l.class] = 1.0;
            }
            t.responsible[cell] = true;
        }
        t
    };
    TargetAssignment {
        scales: [scale(0), scale(1), scale(2)],
    }
}

pub fn assign_batch(labels: &[&[ObjectLabel]], geom: &DetectorGeometry) -> Vec<TargetAssignment> {
    labels.iter().map(|l| assign_targets(l, geom)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(class: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> ObjectLabel {
        ObjectLabel {
            class,
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
        }
    }

    #[test]
    fn center_cell_is_responsible() {
        let geom = DetectorGeometry::default();
        let a = assign_targets(&[label(2, 0.4, 0.4, 0.6, 0.6)], &geom);
        let s = &a.scales[2];
        assert_eq!(s.grid, 4);
        let cell = 2 * 4 + 2;
        assert!(s.responsible[cell]);
        assert_eq!(s.responsible.iter().filter(|&&r| r).count(), 1);
        assert_eq!(s.cls[cell * 4 + 2], 1.0);
        assert_eq!(s.obj[cell], 1.0);
        for sc in &a.scales {
            assert_eq!(sc.responsible.iter().filter(|&&r| r).count(), 1);
        }
    }

    #[test]
    fn empty_labels_assign_nothing() {
        let a = assign_targets(&[], &DetectorGeometry::default());
        assert!(!a.has_objects());
        for s in &a.scales {
            assert!(s.obj.iter().all(|&v| v == 0.0));
            assert!(s.cls.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn larger_box_wins_a_shared_cell() {
        let geom = DetectorGeometry::default();
        let small = label(0, 0.45, 0.45, 0.55, 0.55); // area 0.01
        let big = label(1, 0.4, 0.4, 0.6, 0.6); // area 0.04
        let a = assign_targets(&[small, big], &geom);
        let s = &a.scales[2];
        let cell = 2 * 4 + 2;
        assert_eq!(s.boxes[cell], Some(big.bbox));
        assert_eq!(s.cls[cell * 4 + 1], 1.0);
        assert_eq!(s.cls[cell * 4], 0.0);
        assert_eq!(assign_targets(&[big, small], &geom), a);
    }

    #[test]
    fn right_edge_center_stays_in_grid() {
        let a = assign_targets(&[label(0, 0.98, 0.0, 1.0, 1.0)], &DetectorGeometry::default());
        assert!(a.scales[0].responsible[8 * 16 + 15]);
    }
}
