// MIoU from segmentation labels, the filter-count to bitrate mapping, and
// lookups in the bundled rate-accuracy table.

use semabr::metrics::{bitrate_for_ratio, miou, ratio_for_filters, ConfusionMatrix, RateAccuracyTable};

fn main() {
    // a 4x4 label grid with three classes and a few mistakes
    let truth = [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2];
    let pred = [0, 0, 1, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 1, 2];
    let cm = ConfusionMatrix::from_labels(3, &truth, &pred).expect("labels in range");
    for c in 0..3 {
        println!("class {c} IoU {:.4}", cm.class_iou(c).unwrap());
    }
    println!("MIoU {:.4}\n", miou(&cm).unwrap());

    // the encoder's output channel count sets the compression ratio
    for filters in [128, 64, 32, 16] {
        let ratio = ratio_for_filters(filters).unwrap();
        let kbps = bitrate_for_ratio(7680.0, ratio).unwrap();
        println!("{filters:>3} filters -> ratio {ratio:>2} -> {kbps:>6.0} kbps");
    }

    let table = RateAccuracyTable::bundled();
    println!("\n{:>6} {:>8} {:>12} {:>8}", "kbps", "abrvsc", "traditional", "gain");
    for p in table.points("abrvsc").unwrap() {
        let sem = p.miou;
        let trad = table.miou_at("traditional", p.bitrate_kbps).unwrap();
        println!(
            "{:>6.0} {:>8.3} {:>12.3} {:>7.2}%",
            p.bitrate_kbps,
            sem,
            trad,
            100.0 * (sem - trad) / trad
        );
    }
}
