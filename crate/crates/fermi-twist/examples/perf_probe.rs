use fermi_twist::critical::CriticalParams;
use fermi_twist::decomposition::StandardPartition;
use fermi_twist::equidistribution::{
    reference_expectation_direct, reference_expectation_panels, Observable,
};
use fermi_twist::map::{MapParams, Point};
use fermi_twist::pairs::make_reference_pair;
use std::time::Instant;

fn main() {
    let cps = CriticalParams::with_k2(512.0);
    // hybrid vs panels cross-check at strip-crossing cell, moderate height
    {
        let params = MapParams::new(1.0, 3.0).unwrap();
        let partition = StandardPartition::new(cps.delta).unwrap();
        let obs = Observable::cosine(1);
        for center in [0.05f64, 1.5] {
            let anchor = Point::new(center, 700.0);
            let pair =
                make_reference_pair(center - 0.15, center + 0.15, anchor, &params, cps.delta)
                    .unwrap();
            let t = Instant::now();
            let h = reference_expectation_direct(&pair, &obs, 1, &params, &cps, &partition).unwrap();
            let th = t.elapsed();
            let t = Instant::now();
            let p = reference_expectation_panels(&pair, &obs, 1, &params, &cps, &partition).unwrap();
            let tp = t.elapsed();
            eprintln!(
                "center={center}: hybrid {:+.6e}±{:.1e} ({th:?}) vs panels {:+.6e} ({tp:?}) diff {:.1e}",
                h.value, h.std_error, p.value, (h.value - p.value).abs()
            );
        }
    }
    // hybrid cost at extreme heights
    for &(gamma, y) in &[(3.0, 1e4), (3.0, 1e5), (2.5, 1e4)] {
        let params = MapParams::new(1.0, gamma).unwrap();
        let partition = StandardPartition::new(cps.delta).unwrap();
        let obs = Observable::cosine(1);
        let anchor = Point::new(0.05, y);
        let pair = make_reference_pair(-0.1, 0.2, anchor, &params, cps.delta).unwrap();
        let t = Instant::now();
        let e = reference_expectation_direct(&pair, &obs, 1, &params, &cps, &partition).unwrap();
        eprintln!(
            "gamma={gamma} y={y:.0e} k=1 hybrid: {:+.4e}±{:.0e} in {:?}",
            e.value, e.std_error, t.elapsed()
        );
    }
    // k=2 brute-force timings for the second fit grid
    for &y in &[110.0, 178.0, 316.0] {
        let params = MapParams::new(1.0, 2.5).unwrap();
        let partition = StandardPartition::new(cps.delta).unwrap();
        let obs = Observable::cosine(1);
        let anchor = Point::new(1.5, y);
        let pair = make_reference_pair(1.35, 1.65, anchor, &params, cps.delta).unwrap();
        let t = Instant::now();
        let e = reference_expectation_direct(&pair, &obs, 2, &params, &cps, &partition).unwrap();
        eprintln!("gamma=2.5 y={y:.0} k=2: {:+.4e} in {:?}", e.value, t.elapsed());
    }
}
