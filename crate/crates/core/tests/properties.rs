use std::collections::BTreeSet;

use proptest::prelude::*;

use fedradio::adversary::{wcl_estimate, Nu};
use fedradio::experiments::Labeler;
use fedradio::fed_engine::{aggregate_h, aggregate_theta, clip, norm, UserDataset};
use fedradio::geometry::{traverse, GridSpec, Link};
use fedradio::privacy::{
    localization_error_p, optimize_allocation, plane_allocation, solve_offset, uniform_allocation, AllocatorConfig,
    NoiseAllocation, PlaneParams,
};
use fedradio::radio_model::{ChannelModel, Measurement, ObstacleMap, PropagationParams};

const SIDE: f64 = 50.0;

fn grid() -> GridSpec {
    GridSpec::new([0.0, 0.0], 5.0, 10, 10).unwrap()
}

fn near_line(v: f64, cs: f64) -> bool {
    let f = v / cs;
    (f - f.round()).abs() < 1e-6
}

prop_compose! {
    fn link_in(lo: f64, hi: f64)(
        ux in lo..hi, uy in lo..hi, uz in 0.0..5.0,
        dx in lo..hi, dy in lo..hi, dz in 20.0..60.0,
    ) -> Link {
        Link::new([ux, uy, uz], [dx, dy, dz]).unwrap()
    }
}

fn grazing(l: &Link, cs: f64) -> bool {
    let (a, b) = (l.user(), l.station());
    (near_line(a[0], cs) && near_line(b[0], cs) && (a[0] - b[0]).abs() < 1e-9)
        || (near_line(a[1], cs) && near_line(b[1], cs) && (a[1] - b[1]).abs() < 1e-9)
}

proptest! {
    #[test]
    fn traversal_is_symmetric_under_endpoint_swap(l in link_in(0.0, SIDE)) {
        let g = grid();
        prop_assume!(!grazing(&l, g.cell_size()));
        let fwd: BTreeSet<usize> = traverse(&g, &l).cells.iter().map(|c| c.cell).collect();
        let back: BTreeSet<usize> = traverse(&g, &l.reversed()).cells.iter().map(|c| c.cell).collect();
        prop_assert_eq!(fwd, back);
    }

    #[test]
    fn chords_sum_to_horizontal_length(l in link_in(0.0, SIDE)) {
        let t = traverse(&grid(), &l);
        let (a, b) = (l.user(), l.station());
        let len = (a[0] - b[0]).hypot(a[1] - b[1]);
        prop_assert!((t.total_chord() - len).abs() <= 1e-9 * len.max(1.0));
        prop_assert!(t.cells.iter().all(|c| c.chord >= -1e-12));
    }

    #[test]
    fn chords_of_clipped_links_stay_inside(l in link_in(-30.0, SIDE + 30.0)) {
        let t = traverse(&grid(), &l);
        let (a, b) = (l.user(), l.station());
        let len = (a[0] - b[0]).hypot(a[1] - b[1]);
        prop_assert!(t.total_chord() <= len + 1e-9);
        let lo = a[2].min(b[2]) - 1e-9;
        let hi = a[2].max(b[2]) + 1e-9;
        prop_assert!(t.cells.iter().all(|c| c.z >= lo && c.z <= hi));
    }

    #[test]
    fn traversal_matches_dense_sampling(l in link_in(0.0, SIDE)) {
        let g = grid();
        prop_assume!(!grazing(&l, g.cell_size()));
        let t = traverse(&g, &l);
        let (a, b) = (l.user(), l.station());
        let n = 20_000;
        let mut seen = BTreeSet::new();
        for k in 0..=n {
            let s = k as f64 / n as f64;
            let p = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            if near_line(p[0], g.cell_size()) || near_line(p[1], g.cell_size()) {
                continue;
            }
            if let Some(m) = g.locate(p) {
                seen.insert(m);
            }
        }
        let cells: BTreeSet<usize> = t.cells.iter().map(|c| c.cell).collect();
        prop_assert!(seen.is_subset(&cells), "sampled {:?} not within {:?}", seen, cells);
        let spacing = (a[0] - b[0]).hypot(a[1] - b[1]) / n as f64;
        for c in &t.cells {
            if c.chord > 3.0 * spacing {
                prop_assert!(seen.contains(&c.cell), "cell {} with chord {} never sampled", c.cell, c.chord);
            }
        }
        let mut order = t.cells.iter().map(|c| c.cell).collect::<Vec<_>>();
        order.dedup();
        prop_assert_eq!(order.len(), cells.len());
    }

    #[test]
    fn los_indicator_decreases_with_height(
        l in link_in(0.0, SIDE),
        base in prop::collection::vec(0.0..40.0f64, 100),
        pick in 0usize..1000,
        bump in 0.1..10.0f64,
    ) {
        let g = grid();
        let model = ChannelModel::new(g, 0.5).unwrap();
        let t = traverse(&g, &l);
        prop_assume!(!t.is_empty());
        let m = t.cells[pick % t.len()].cell;
        let h0 = ObstacleMap::new(base.clone()).unwrap();
        let mut raised = base;
        raised[m] += bump;
        let h1 = ObstacleMap::new(raised).unwrap();
        let s0 = model.los_indicator(&l, &h0).unwrap();
        let s1 = model.los_indicator(&l, &h1).unwrap();
        prop_assert!(s1 <= s0);
        prop_assert!(s0 > 0.0 && s0 <= 1.0);
    }

    #[test]
    fn gradient_vanishes_off_the_links(
        links in prop::collection::vec(link_in(0.0, SIDE), 1..6),
        heights in prop::collection::vec(0.0..30.0f64, 100),
    ) {
        let g = grid();
        let model = ChannelModel::new(g, 0.5).unwrap();
        let user = links[0].user();
        let samples: Vec<Measurement> = links
            .iter()
            .map(|l| Measurement { link: Link::new(user, l.station()).unwrap(), y: -80.0 })
            .collect();
        let ds = UserDataset::new(0, user, samples).unwrap();
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let h = ObstacleMap::new(heights).unwrap();
        let gh = model.grad_h(&ds, &theta, &h).unwrap();
        let touched: BTreeSet<usize> = ds
            .samples
            .iter()
            .flat_map(|s| traverse(&g, &s.link).cells.into_iter().map(|c| c.cell))
            .collect();
        for (m, v) in gh.iter().enumerate() {
            if !touched.contains(&m) {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(-1e3..1e3f64, 1..50), c in 1e-3..1e2f64) {
        let out = clip(&g, c).unwrap();
        prop_assert!(norm(&out) <= c * (1.0 + 1e-12));
        let n = norm(&g);
        if n <= c {
            prop_assert_eq!(out, g);
        } else {
            let f = c / n;
            for (a, b) in out.iter().zip(&g) {
                prop_assert!((a - f * b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn aggregation_ignores_upload_order(
        ups in prop::collection::vec((prop::collection::vec(-5.0..5.0f64, 6), 1usize..60), 1..8),
        rot in 0usize..8,
    ) {
        let h = ObstacleMap::new(vec![10.0; 6]).unwrap();
        let mut shuffled = ups.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = aggregate_h(&h, &ups, 0.7).unwrap();
        let b = aggregate_h(&h, &shuffled, 0.7).unwrap();
        for (x, y) in a.heights().iter().zip(b.heights()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let th = PropagationParams::new(-20.0, -30.0, -30.0, -30.0);
        let tu: Vec<([f64; 4], usize)> = ups.iter().map(|(g, j)| ([g[0], g[1], g[2], g[3]], *j)).collect();
        let mut ts = tu.clone();
        ts.reverse();
        let ta = aggregate_theta(&th, &tu, 0.1).unwrap().to_array();
        let tb = aggregate_theta(&th, &ts, 0.1).unwrap().to_array();
        for (x, y) in ta.iter().zip(&tb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn offset_spends_the_budget_exactly(
        g in prop::collection::vec(-1.0..1.0f64, 100),
        angle in 0.0..std::f64::consts::TAU,
        r in 0.0..0.1f64,
        mu in 0.01..60.0f64,
    ) {
        let grd = grid();
        prop_assume!(g.iter().any(|v| v.abs() > 1e-3));
        let u = [angle.cos(), angle.sin()];
        let b = solve_offset(&g, &grd, u, r, mu).unwrap();
        let sigma = plane_allocation(&g, &grd, &PlaneParams::new(u, r, b).unwrap()).unwrap();
        let target = mu * g.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((sigma.total() - target).abs() / target < 1e-8);
        prop_assert!(sigma.within_budget(&g, mu));
        prop_assert!(sigma.variances().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn every_mechanism_respects_the_budget(
        g in prop::collection::vec(-1.0..1.0f64, 100),
        px in 0.0..SIDE, py in 0.0..SIDE,
        mu in 0.0..50.0f64,
        rho in 0.0..20.0f64,
    ) {
        let grd = grid();
        prop_assume!(g.iter().any(|v| v.abs() > 1e-3));
        prop_assert!(uniform_allocation(&g, mu).unwrap().within_budget(&g, mu));
        let res = optimize_allocation(&g, &grd, [px, py], mu, &AllocatorConfig::with_rho(rho)).unwrap();
        prop_assert!(res.allocation.within_budget(&g, mu));
        prop_assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
        if let Some(p) = res.plane {
            prop_assert!((p.u()[0].hypot(p.u()[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn localization_error_peaks_when_noise_aligns(
        g in prop::collection::vec(0.0..1.0f64, 100),
        px in 5.0..45.0f64, py in 5.0..45.0f64,
        mu in 0.1..30.0f64,
        radius in 1.0..5.0f64,
        angle in 0.0..std::f64::consts::TAU,
    ) {
        let grd = grid();
        let p_u = [px, py];
        let g2: Vec<f64> = g.iter().map(|v| v * v).collect();
        let tot: f64 = g2.iter().sum();
        prop_assume!(tot > 1e-6);
        let centers = grd.centers();
        let dg = [
            g2.iter().zip(&centers).map(|(w, c)| w * c[0]).sum::<f64>() / tot - px,
            g2.iter().zip(&centers).map(|(w, c)| w * c[1]).sum::<f64>() / tot - py,
        ];
        let dgn = dg[0].hypot(dg[1]);
        prop_assume!(dgn > 1e-6);
        let p_of = |dn: [f64; 2]| ((dg[0] + mu * dn[0]).powi(2) + (dg[1] + mu * dn[1]).powi(2)) / (1.0 + mu).powi(2);
        let aligned = p_of([radius * dg[0] / dgn, radius * dg[1] / dgn]);
        let other = p_of([radius * angle.cos(), radius * angle.sin()]);
        prop_assert!(aligned >= other - 1e-12 * aligned);
        let anti = p_of([-radius * dg[0] / dgn, -radius * dg[1] / dgn]);
        prop_assert!(other >= anti - 1e-12 * aligned);
        // The library agrees with the closed form for noise on one cell.
        let m = (angle / std::f64::consts::TAU * 100.0) as usize % 100;
        let mut v = vec![0.0; 100];
        v[m] = 1.0;
        let c = centers[m];
        let lib = localization_error_p(&g, &NoiseAllocation::new(v).unwrap(), &grd, p_u, mu).unwrap();
        let want = p_of([c[0] - px, c[1] - py]);
        prop_assert!((lib - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn wcl_is_scale_and_clip_invariant(
        g in prop::collection::vec(-1.0..1.0f64, 100),
        c in prop_oneof![1e-6..1e-3f64, 0.5..50.0f64, -50.0..-0.5f64],
        nu in prop_oneof![Just(Nu::Inf), (0.5..6.0f64).prop_map(|v| Nu::new(v).unwrap())],
    ) {
        let grd = grid();
        prop_assume!(g.iter().any(|v| v.abs() > 1e-3));
        let base = wcl_estimate(&g, &grd, nu).unwrap();
        let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
        let e = wcl_estimate(&scaled, &grd, nu).unwrap();
        prop_assert!((e[0] - base[0]).abs() < 1e-9 && (e[1] - base[1]).abs() < 1e-9);
        let clipped = clip(&g, 0.1).unwrap();
        let e = wcl_estimate(&clipped, &grd, nu).unwrap();
        prop_assert!((e[0] - base[0]).abs() < 1e-9 && (e[1] - base[1]).abs() < 1e-9);
    }

    #[test]
    fn wcl_stays_in_the_hull_of_weighted_cells(
        cells in prop::collection::btree_map(0usize..100, 0.01..1.0f64, 1..8),
        nu in 0.5..6.0f64,
    ) {
        let grd = grid();
        let mut g = vec![0.0; 100];
        for (&m, &v) in &cells {
            g[m] = v;
        }
        let e = wcl_estimate(&g, &grd, Nu::new(nu).unwrap()).unwrap();
        let cs: Vec<[f64; 2]> = cells.keys().map(|&m| grd.cell_center(m).unwrap()).collect();
        let (xl, xh) = cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, c| (a.0.min(c[0]), a.1.max(c[0])));
        let (yl, yh) = cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, c| (a.0.min(c[1]), a.1.max(c[1])));
        prop_assert!(e[0] >= xl - 1e-9 && e[0] <= xh + 1e-9 && e[1] >= yl - 1e-9 && e[1] <= yh + 1e-9);
        // Hull membership: no separating line through any pair of hull
        // candidates has all weighted centers strictly on one side and the
        // estimate on the other.
        for a in &cs {
            for b in &cs {
                let n = [b[1] - a[1], a[0] - b[0]];
                if n[0] == 0.0 && n[1] == 0.0 {
                    continue;
                }
                let side = |p: [f64; 2]| n[0] * (p[0] - a[0]) + n[1] * (p[1] - a[1]);
                if cs.iter().all(|c| side(*c) <= 1e-9) {
                    prop_assert!(side(e) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn wcl_inf_ignores_perturbations_below_the_peak(
        g in prop::collection::vec(-1.0..1.0f64, 100),
        noise in prop::collection::vec(-1.0..1.0f64, 100),
    ) {
        let grd = grid();
        let peak = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        prop_assume!(peak > 1e-3);
        let arg = g.iter().position(|v| v.abs() == peak).unwrap();
        let second = g.iter().enumerate().filter(|(m, _)| *m != arg).fold(0.0_f64, |a, (_, v)| a.max(v.abs()));
        let room = 0.49 * (peak - second);
        prop_assume!(room > 0.0);
        let pert: Vec<f64> = g.iter().zip(&noise).map(|(v, n)| v + room * n).collect();
        prop_assert_eq!(wcl_estimate(&g, &grd, Nu::Inf).unwrap(), wcl_estimate(&pert, &grd, Nu::Inf).unwrap());
    }

    #[test]
    fn segmented_and_sharp_smoothed_labels_agree_far_from_boundaries(
        l in link_in(0.0, SIDE),
        heights in prop::collection::vec(prop_oneof![Just(0.0f64), 10.0..45.0f64], 100),
    ) {
        let grd = grid();
        let h = ObstacleMap::new(heights).unwrap();
        let t = traverse(&grd, &l);
        let margin = t.cells.iter().map(|c| (c.z - h.heights()[c.cell]).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 5.0);
        let theta = PropagationParams::new(-22.0, -28.0, -36.0, -22.0);
        let seg = Labeler::Segmented.gain(&grd, &l, &theta, &h).unwrap();
        let smooth = Labeler::Smoothed { sharpness: 10.0 }.gain(&grd, &l, &theta, &h).unwrap();
        prop_assert!((seg - smooth).abs() < 0.01);
    }
}
