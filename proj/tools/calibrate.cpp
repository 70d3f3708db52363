// Runs the linear baseline on the same data protocol the acceptance suite
// uses and prints the numbers that are frozen into the acceptance thresholds.
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "apa/data.hpp"
#include "apa/eval.hpp"
#include "apa/ridge.hpp"

using namespace apa;

int main() {
    const std::uint64_t data_seed = 601;
    const std::uint64_t split_seed = 9;
    const std::size_t n_utts = 600;

    std::vector<double> q;
    Dataset full = gen_synthetic(n_utts, data_seed, FeatureManifest{}, SynthParams{}, &q);

    // Map each utterance to its phone range in latent order.
    std::map<std::string, std::pair<std::size_t, std::size_t>> ranges;
    std::size_t cursor = 0;
    for (const UtteranceEntry& u : full.utterances) {
        ranges[u.utt_id] = {cursor, u.phone_count()};
        cursor += u.phone_count();
    }

    auto [train, test] = split_dataset(full, 5.0 / 6.0, split_seed);
    std::printf("split: %zu train / %zu test utterances\n", train.utterances.size(), test.utterances.size());

    auto collect = [&](const Dataset& side, std::vector<std::vector<double>>& x, std::vector<double>& yq,
                       std::vector<double>& ylab) {
        for (const UtteranceEntry& u : side.utterances) {
            auto [start, count] = ranges.at(u.utt_id);
            std::size_t k = start;
            for (const WordEntry& w : u.words)
                for (const PhoneEntry& p : w.phones) {
                    x.push_back(assemble_multiview(p, side.manifest));
                    yq.push_back(q[k]);
                    ylab.push_back(p.accuracy);
                    ++k;
                }
            if (k != start + count) {
                std::fprintf(stderr, "phone range mismatch for %s\n", u.utt_id.c_str());
                return 1;
            }
        }
        return 0;
    };

    std::vector<std::vector<double>> xtr, xte;
    std::vector<double> qtr, qte, ltr, lte;
    if (collect(train, xtr, qtr, ltr) || collect(test, xte, qte, lte)) return 1;
    std::printf("phones: %zu train / %zu test\n", xtr.size(), xte.size());

    RidgeModel on_q = ridge_fit(xtr, qtr);
    std::vector<double> pred_q = ridge_predict(on_q, xte);
    std::printf("ridge trained on latent q:   pcc vs q = %.6f   pcc vs label = %.6f\n", pcc(pred_q, qte),
                pcc(pred_q, lte));

    RidgeModel on_label = ridge_fit(xtr, ltr);
    std::vector<double> pred_l = ridge_predict(on_label, xte);
    std::printf("ridge trained on labels:     pcc vs q = %.6f   pcc vs label = %.6f\n", pcc(pred_l, qte),
                pcc(pred_l, lte));

    std::printf("label-vs-q correlation on test: %.6f\n", pcc(lte, qte));
    return 0;
}
