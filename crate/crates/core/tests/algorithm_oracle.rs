mod common;

#[test]
fn engine_matches_line_by_line_transcription() {
    for (i, s) in common::scenarios().iter().enumerate() {
        let r = common::oracle_gap(s);
        assert!(r.gap <= 1e-12, "scenario {i}: max deviation {:e}", r.gap);
        // warm-up keeps every sample; later rounds must exercise both selectors
        assert!(r.selected[0].iter().all(|&n| n == s.samples as f64));
        let partial = r.selected[1..].iter().flatten().any(|&n| n < s.samples as f64);
        assert!(partial, "scenario {i}: selector never dropped a sample {:?}", r.selected);
        assert!(r.split_batches > 0, "scenario {i}: w and θ always agreed");
    }
}
