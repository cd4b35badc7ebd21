//! BLEU, ROUGE, METEOR and CIDEr-D on a few report sentences.

use groundcxr::metrics::classification_report;
use groundcxr::metrics::text::{bleu, cider, meteor, rouge, BLEU_MAX_N};
use groundcxr::{parse_diagnoses, GlobalLabel};

fn main() {
    let pairs: Vec<(String, String)> = [
        ("Global diseases of this chest radiograph are Pneumonia.", "Global diseases of this chest radiograph are Pneumonia, Tuberculosis."),
        ("Global diseases of this chest radiograph are No finding.", "Global diseases of this chest radiograph are No finding."),
        ("Global diseases of this chest radiograph are Other disease.", "Global diseases of this chest radiograph are Lung tumor."),
        ("The chest radiograph shows no findings.", "Global diseases of this chest radiograph are No finding."),
    ]
    .iter()
    .map(|(c, r)| (c.to_string(), r.to_string()))
    .collect();

    let b = bleu(&pairs, BLEU_MAX_N);
    for (n, s) in b.cumulative.iter().enumerate() {
        println!("BLEU-{}     {s:.4}", n + 1);
    }
    let r = rouge(&pairs);
    println!("ROUGE-1    {:.4}\nROUGE-2    {:.4}\nROUGE-L    {:.4}\nROUGE-Lsum {:.4}", r.rouge1, r.rouge2, r.rouge_l, r.rouge_lsum);
    println!("METEOR     {:.4}", meteor(&pairs));
    println!("CIDEr-D    {:.4}", cider(&pairs).score);

    let sets: Vec<_> = pairs
        .iter()
        .map(|(c, r)| (parse_diagnoses(r).value, parse_diagnoses(c).value))
        .collect();
    println!("\n{}", classification_report::<GlobalLabel>(&sets));
}
