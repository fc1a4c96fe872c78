//! Generates the two synthetic tasks, splits and standardises them, and
//! parses a small CSV table.
//!
//! cargo run --example datasets

use ocd::datasets::{gen_blobs, gen_tabular_reg, parse_csv_table, split, standardize_splits, SplitSpec, TabularGenerator};

fn main() -> ocd::Result<()> {
    let blobs = gen_blobs(0, 4000, 4, 0.8, 2)?;
    let labels = blobs.labels().expect("classification");
    let mut counts = [0usize; 4];
    labels.iter().for_each(|&y| counts[y] += 1);
    println!("blobs: n={} dim={} class counts {counts:?}", blobs.len(), blobs.dim());

    let (train, val, test) = split(&blobs, &SplitSpec::default())?;
    let (train, _, test, st) = standardize_splits(&train, &val, &test);
    println!(
        "split 70/10/20: train {} test {}; train means {:.1e} {:.1e}, stds {:.3} {:.3}",
        train.len(),
        test.len(),
        st.mean[0],
        st.mean[1],
        st.std[0],
        st.std[1]
    );

    let tab = gen_tabular_reg(0, 5000, 8, 0.1)?;
    let y: Vec<f64> = (0..tab.len())
        .map(|i| match tab.target(i) {
            ocd::numkit::Target::Values(v) => v[0],
            ocd::numkit::Target::Class(_) => unreachable!(),
        })
        .collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
    let analytic = TabularGenerator::new(0, 8, 0.1).analytic_variance();
    println!("tabular: n={} d={} target variance {var:.4} (analytic {analytic:.4})", tab.len(), tab.dim());

    let table = parse_csv_table(b"a,b,price\n1.0,2.0,3.5\n0.5,-1.0,2.0\n", "price")?;
    println!("csv: {} rows, {} features, targets {:?}", table.len(), table.dim(), table.targets);
    Ok(())
}
