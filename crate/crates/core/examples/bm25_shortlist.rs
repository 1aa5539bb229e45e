//! Lexical pre-retrieval over a small demonstration pool.

use genicl::corpus::{DemonstrationPool, Example};
use genicl::shortlist::{bm25_rank, Bm25Index, Bm25Params};

fn main() -> genicl::Result<()> {
    let docs = [
        "the cat sat on the mat",
        "a dog chased the cat",
        "stock prices fell sharply",
        "the market rallied after prices fell",
        "dogs and cats make good pets",
    ];
    let pool = DemonstrationPool::new(
        docs.iter()
            .enumerate()
            .map(|(i, d)| Example::new(format!("d{i}"), *d, "-"))
            .collect(),
    )?;
    let index = Bm25Index::new(&pool);
    println!("idf(cat) = {:.4}, idf(prices) = {:.4}", index.idf("cat"), index.idf("prices"));
    for q in ["cat on a mat", "prices fell", "pets"] {
        let ranking = bm25_rank(q, &pool, 3, 1.5, 0.75)?;
        let top: Vec<String> = ranking
            .candidates
            .iter()
            .map(|c| format!("{}={:.3}", c.example_id, c.score))
            .collect();
        println!("{q:?}: {}", top.join(" "));
    }
    // The index can be reused with other parameters.
    let flat = index.rank("cat", 5, Bm25Params { k1: 1.2, b: 0.0 });
    println!("b = 0: {:?}", flat.ids().collect::<Vec<_>>());
    Ok(())
}
