//! NDCG@k and AUC on lists small enough to check by hand.
//!
//! Run with `cargo run --example ranking_metrics`.

use ctxrec::eval::{auc, ndcg_at_k, RankedList};

fn main() -> ctxrec::Result<()> {
    // Three candidates, the relevant one scored in the middle.
    // Ranked order: item 2 (0.9), item 0 (0.7, relevant), item 1 (0.4).
    let list = RankedList::from_scored(vec![
        (0, 0.7, true),
        (1, 0.4, false),
        (2, 0.9, false),
    ])?;
    println!("ranked list (score desc): item 2, item 0*, item 1   (* = relevant)");
    for k in 1..=3 {
        println!("  ndcg@{k} = {:.4}", ndcg_at_k(&list, k)?);
    }
    println!("  by hand: ndcg@1 = 0, ndcg@2 = ndcg@3 = 1/log2(3) = {:.4}", 1.0 / 3f64.log2());

    // Ties break toward the smaller item id, so the relevant item 1 ranks
    // ahead of items 5 and 9 at the same score.
    let tied = RankedList::from_scored(vec![
        (9, 0.5, false),
        (1, 0.5, true),
        (5, 0.5, false),
    ])?;
    println!("\nall scores tied: order is item 1*, item 5, item 9");
    println!("  ndcg@1 = {:.4}", ndcg_at_k(&tied, 1)?);

    // AUC is the probability a random positive outscores a random negative,
    // ties counting half.
    let positives = [0.8, 0.6];
    let negatives = [0.7, 0.3];
    // pairs: (0.8 vs 0.7) win, (0.8 vs 0.3) win, (0.6 vs 0.7) loss, (0.6 vs 0.3) win
    println!("\npositives {positives:?} vs negatives {negatives:?}");
    println!("  auc = {:.4}   (3 wins of 4 pairs)", auc(&positives, &negatives)?);

    let with_tie = auc(&[0.5, 0.9], &[0.5])?;
    println!("  one tied pair counts half: auc([0.5, 0.9] vs [0.5]) = {with_tie:.4}");

    // Metrics care only about order, never about score magnitudes.
    let calibrated = auc(&[0.51, 0.52], &[0.11])?;
    let wild = auc(&[510.0, 5_200_000.0], &[-3.0])?;
    println!("\nmonotone rescaling changes nothing: {calibrated:.4} == {wild:.4}");
    Ok(())
}
