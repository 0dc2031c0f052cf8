use cellspan_web::{despike_view, difference_view, population_view, DespikeInput, DiffInput, PopulationInput};

fn population() -> PopulationInput {
    PopulationInput {
        cells: 3,
        fade_a: [3e-4, 1.5e-3],
        fade_b: [0.9, 1.1],
        seed: 0,
    }
}

#[test]
fn despike_view_reports_replacements() {
    let input = DespikeInput {
        samples: 80,
        noise_sigma: 1e-3,
        spike_rate: 0.05,
        spike_magnitude: 0.05,
        window: 5,
        spike_factor: 3.0,
        literal: false,
        seed: 1,
    };
    let v = despike_view(&input).unwrap();
    let raw = v["raw"].as_array().unwrap();
    let cleaned = v["cleaned"].as_array().unwrap();
    assert_eq!(raw.len(), 80);
    for (i, (a, b)) in raw.iter().zip(cleaned).enumerate() {
        let listed = v["replaced"].as_array().unwrap().iter().any(|r| r.as_u64() == Some(i as u64));
        assert_eq!(a != b, listed);
    }
    assert!(despike_view(&DespikeInput { window: 4, ..input }).is_err());
}

#[test]
fn population_view_crosses_end_of_life() {
    let v = population_view(&population()).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    for c in cells {
        let cap: Vec<f64> = c["capacity"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let life = c["lifetime"].as_u64().unwrap() as usize;
        assert!(cap[life] < 0.8 && cap[life - 1] >= 0.8);
    }
}

#[test]
fn difference_view_is_consistent() {
    let input = DiffInput {
        population: population(),
        early_cycles: 12,
        grid_points: 10,
        reference_cycle: 3,
        channel: 1,
        target: 0,
        reference: 2,
    };
    let v = difference_view(&input).unwrap();
    let get = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let (map, intra) = (get("map"), get("intra"));
    assert_eq!(map.len(), 120);
    // Row 3 is the intra reference, so it differences to zero and every
    // other row is offset by it.
    for q in 0..10 {
        assert_eq!(intra[3 * 10 + q], 0.0);
        assert!((intra[5 * 10 + q] - (map[5 * 10 + q] - map[3 * 10 + q])).abs() < 1e-15);
    }
    let same = difference_view(&DiffInput { reference: 0, ..input }).unwrap();
    assert!(same["inter"].as_array().unwrap().iter().all(|x| x.as_f64() == Some(0.0)));
    assert!(difference_view(&DiffInput { channel: 6, ..input }).is_err());
    assert!(difference_view(&DiffInput { target: 9, ..input }).is_err());
}
