//! Peak picking on a 1-D signal with the same semantics as
//! `scipy.signal.find_peaks` restricted to the `distance` and `prominence`
//! conditions: plateau maxima resolve to their middle sample, distance
//! filtering keeps the tallest peaks first, and prominence is measured
//! against the higher of the two flanking minima.

/// Local maxima, excluding the end points. Flat tops report their midpoint
/// (rounded down).
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    if x.len() < 3 {
        return peaks;
    }
    let last = x.len() - 1;
    let mut i = 1;
    while i < last {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead < last && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                let right = ahead - 1;
                peaks.push((i + right) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    peaks
}

/// Removes peaks closer than `distance` samples to a taller kept peak.
pub fn select_by_distance(x: &[f64], peaks: &[usize], distance: usize) -> Vec<usize> {
    if distance <= 1 {
        return peaks.to_vec();
    }
    let mut keep = vec![true; peaks.len()];
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    // Tallest first; among equal heights the later peak wins, as in scipy.
    order.sort_by(|&a, &b| x[peaks[b]].total_cmp(&x[peaks[a]]).then(b.cmp(&a)));
    for &i in &order {
        if !keep[i] {
            continue;
        }
        let mut j = i;
        while j > 0 && peaks[i] - peaks[j - 1] < distance {
            keep[j - 1] = false;
            j -= 1;
        }
        let mut j = i + 1;
        while j < peaks.len() && peaks[j] - peaks[i] < distance {
            keep[j] = false;
            j += 1;
        }
    }
    peaks.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

/// Topographic prominence of each peak.
pub fn prominences(x: &[f64], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&p| {
            let h = x[p];
            let mut left_min = h;
            for i in (0..p).rev() {
                if x[i] > h {
                    break;
                }
                left_min = left_min.min(x[i]);
            }
            let mut right_min = h;
            for &v in &x[p + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            h - left_min.max(right_min)
        })
        .collect()
}

/// Indices of peaks with prominence `>= prominence`, at least `distance`
/// samples apart.
pub fn find_peaks(x: &[f64], prominence: f64, distance: usize) -> Vec<usize> {
    let peaks = local_maxima(x);
    let peaks = select_by_distance(x, &peaks, distance);
    let proms = prominences(x, &peaks);
    peaks
        .into_iter()
        .zip(proms)
        .filter(|(_, p)| *p >= prominence)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reports_midpoint() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 1.0, 0.0]), vec![2]);
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 0.0]), vec![1]);
        // A plateau that runs into the edge is not a peak.
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0]), Vec::<usize>::new());
    }

    #[test]
    fn scipy_reference_values() {
        // scipy.signal.find_peaks([0, 2, 1, 3, 1, 2, 0]) -> [1, 3, 5];
        // peak_prominences -> [1, 3, 1].
        let x = [0.0, 2.0, 1.0, 3.0, 1.0, 2.0, 0.0];
        let p = local_maxima(&x);
        assert_eq!(p, vec![1, 3, 5]);
        assert_eq!(prominences(&x, &p), vec![1.0, 3.0, 1.0]);
        assert_eq!(find_peaks(&x, 2.0, 1), vec![3]);
        assert_eq!(select_by_distance(&x, &p, 3), vec![3]);
        assert_eq!(select_by_distance(&x, &p, 2), vec![1, 3, 5]);
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(find_peaks(&[1.0; 10], 0.0, 1).is_empty());
        assert!(find_peaks(&[], 0.0, 1).is_empty());
    }
}
