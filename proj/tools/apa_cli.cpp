// Command-line front end for the assessment pipeline: tokenizer training,
// synthetic data generation, model training, evaluation, scoring, and
// gradient self-verification.
//
// Exit codes: 0 success, 1 verification or training failure, 2 usage or
// input error.
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "apa/data.hpp"
#include "apa/eval.hpp"
#include "apa/gradsuite.hpp"
#include "apa/model.hpp"
#include "apa/supphone.hpp"
#include "apa/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace apa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInput = 2;

int classify(const Error& e) {
    if (dynamic_cast<const TrainingError*>(&e)) return kExitFailure;
    if (dynamic_cast<const ContractError*>(&e)) return kExitFailure;
    return kExitInput;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << content;
        if (!out) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw IoError("no such file: '" + path + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::vector<std::vector<std::string>> word_corpus(const Dataset& d) {
    std::vector<std::vector<std::string>> corpus;
    for (const UtteranceEntry& u : d.utterances)
        for (const WordEntry& w : u.words) {
            std::vector<std::string> ph;
            for (const PhoneEntry& p : w.phones) ph.push_back(p.symbol);
            corpus.push_back(std::move(ph));
        }
    return corpus;
}

struct TrainFlags {
    std::string config_path, data_path, vocab_path, out_path;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> ablate;
    long epochs = -1, batch_size = -1, halve_every = -1, halve_after = -1;
    double lr0 = -1.0, grad_clip = -1.0, dropout = -1.0;
};

// Config file layout: {"model": {...}, "train": {...}}, both optional, keys
// merged over the built-in defaults. Command-line flags win over the file.
void load_run_config(const TrainFlags& fl, ModelConfig& mcfg, TrainConfig& tcfg) {
    Ablation file_abl;
    if (!fl.config_path.empty()) {
        json j = json::parse(read_file(fl.config_path), nullptr, false);
        if (j.is_discarded()) throw ParseError(fl.config_path + ": invalid JSON");
        if (j.contains("model")) {
            json merged = json::parse(config_to_json(mcfg, file_abl));
            for (auto& [k, v] : j.at("model").items()) {
                if (!merged.contains(k)) throw ParseError(fl.config_path + ": unknown model key '" + k + "'");
                merged[k] = v;
            }
            config_from_json(merged.dump(), mcfg, file_abl);
            tcfg.ablation = file_abl;
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            try {
                if (t.contains("epochs")) tcfg.epochs = t.at("epochs").get<std::size_t>();
                if (t.contains("batch_size")) tcfg.batch_size = t.at("batch_size").get<std::size_t>();
                if (t.contains("lr0")) tcfg.lr0 = t.at("lr0").get<double>();
                if (t.contains("halve_every")) tcfg.halve_every = t.at("halve_every").get<std::size_t>();
                if (t.contains("halve_after_epoch"))
                    tcfg.halve_after_epoch = t.at("halve_after_epoch").get<std::size_t>();
                if (t.contains("seeds")) tcfg.seeds = t.at("seeds").get<std::vector<std::uint64_t>>();
                if (t.contains("grad_clip")) tcfg.grad_clip = t.at("grad_clip").get<double>();
            } catch (const json::exception& e) {
                throw ParseError(fl.config_path + ": train section: " + e.what());
            }
        }
    }
    if (fl.epochs >= 0) tcfg.epochs = std::size_t(fl.epochs);
    if (fl.batch_size >= 0) tcfg.batch_size = std::size_t(fl.batch_size);
    if (fl.lr0 >= 0.0) tcfg.lr0 = fl.lr0;
    if (fl.halve_every >= 0) tcfg.halve_every = std::size_t(fl.halve_every);
    if (fl.halve_after >= 0) tcfg.halve_after_epoch = std::size_t(fl.halve_after);
    if (fl.grad_clip >= 0.0) tcfg.grad_clip = fl.grad_clip;
    if (fl.dropout >= 0.0) mcfg.dropout = fl.dropout;
    if (!fl.seeds.empty()) tcfg.seeds = fl.seeds;
    for (const std::string& name : fl.ablate) tcfg.ablation = apply_drop(tcfg.ablation, drop_from_name(name));
}

json losses_json(const LossBreakdown& bd) {
    json j;
    j["p"] = bd.phone;
    for (std::size_t a = 0; a < 3; ++a) j["w" + std::to_string(a)] = bd.word[a];
    for (std::size_t a = 0; a < 5; ++a) j["u" + std::to_string(a)] = bd.utt[a];
    j["total"] = bd.total;
    return j;
}

struct SeedPaths {
    std::string model, log, manifest;
};

SeedPaths seed_paths(const std::string& out, bool single_file, std::uint64_t seed) {
    if (single_file) {
        const std::string base = out.substr(0, out.size() - 5);
        return {out, base + ".log.jsonl", base + ".run.json"};
    }
    const fs::path dir(out);
    const std::string tag = std::to_string(seed);
    return {(dir / ("model.seed" + tag + ".apam")).string(), (dir / ("train.seed" + tag + ".log.jsonl")).string(),
            (dir / ("run.seed" + tag + ".json")).string()};
}

int cmd_bpe_train(const std::string& corpus_path, std::size_t vocab_size, const std::string& out_path) {
    require_file(corpus_path);
    Dataset d = load_dataset(corpus_path, ScoreScale::normalized);
    SupPhoneVocab v = train_bpe(word_corpus(d), vocab_size, d.phone_inventory);
    save_vocab(v, out_path);
    std::cout << "vocabulary: " << v.size() << " tokens (" << v.base_symbols.size() << " base + "
              << v.merges.size() << " merges) -> " << out_path << "\n";
    return kExitOk;
}

int cmd_synth(std::size_t utterances, std::uint64_t seed, const std::string& out_path) {
    Dataset d = gen_synthetic(utterances, seed, FeatureManifest{});
    save_dataset(d, out_path);
    std::size_t phones = 0;
    for (const UtteranceEntry& u : d.utterances) phones += u.phone_count();
    std::cout << "dataset: " << d.utterances.size() << " utterances, " << phones << " phones -> " << out_path
              << "\n";
    return kExitOk;
}

int cmd_train(const TrainFlags& fl) {
    ModelConfig mcfg;
    TrainConfig tcfg;
    load_run_config(fl, mcfg, tcfg);
    validate_train_config(tcfg);

    require_file(fl.data_path);
    require_file(fl.vocab_path);
    Dataset data = load_dataset(fl.data_path, ScoreScale::normalized, mcfg.max_len);
    SupPhoneVocab vocab = load_vocab(fl.vocab_path);
    mcfg.phone_vocab_size = vocab.base_symbols.size();
    mcfg.supphone_vocab_size = vocab.size();
    validate_config(mcfg);
    const std::uint64_t dataset_digest = fnv1a(read_file(fl.data_path));

    const bool single_file = tcfg.seeds.size() == 1 && fl.out_path.size() > 5 &&
                             fl.out_path.substr(fl.out_path.size() - 5) == ".apam";
    if (!single_file) fs::create_directories(fl.out_path);

    for (std::uint64_t seed : tcfg.seeds) {
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult<real> result = train<real>(data, vocab, mcfg, tcfg, seed);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        const SeedPaths paths = seed_paths(fl.out_path, single_file, seed);
        save_model(paths.model, result.params, mcfg, tcfg.ablation);

        std::ostringstream log;
        for (const EpochLog& e : result.history) {
            json line;
            line["epoch"] = e.epoch;
            line["lr"] = e.lr;
            line["losses"] = losses_json(e.loss);
            log << line.dump() << "\n";
        }
        write_file_atomic(paths.log, log.str());

        json manifest;
        manifest["config_digest"] = hex64(config_digest(mcfg, tcfg.ablation));
        manifest["dataset_digest"] = hex64(dataset_digest);
        manifest["seed"] = seed;
        manifest["precision"] = sizeof(real) == 4 ? "float32" : "float64";
        manifest["epochs"] = tcfg.epochs;
        manifest["batch_size"] = tcfg.batch_size;
        manifest["lr0"] = tcfg.lr0;
        manifest["ablation"] = {{"sup_phoneme", tcfg.ablation.sup_phoneme},
                                {"rel_pos", tcfg.ablation.rel_pos},
                                {"ds_conv", tcfg.ablation.ds_conv}};
        manifest["drop"] = fl.ablate;
        manifest["final_loss"] = losses_json(result.history.back().loss);
        manifest["wall_time_seconds"] = wall;
        write_file_atomic(paths.manifest, manifest.dump(2) + "\n");

        std::cout << "seed " << seed << ": final loss " << result.history.back().loss.total << " ("
                  << result.history.size() << " epochs, " << wall << " s) -> " << paths.model << "\n";
    }
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& seeds_dir, const std::string& data_path,
             const std::string& vocab_path, const std::string& report_json, const std::string& report_text) {
    require_file(data_path);
    require_file(vocab_path);
    Dataset data = load_dataset(data_path, ScoreScale::normalized);
    SupPhoneVocab vocab = load_vocab(vocab_path);

    std::vector<std::string> model_files;
    if (!model_path.empty()) model_files.push_back(model_path);
    if (!seeds_dir.empty()) {
        if (!fs::is_directory(seeds_dir)) throw IoError("'" + seeds_dir + "' is not a directory");
        for (const fs::directory_entry& e : fs::directory_iterator(seeds_dir))
            if (e.path().extension() == ".apam") model_files.push_back(e.path().string());
        std::sort(model_files.begin(), model_files.end());
        if (model_files.empty()) throw IoError("no .apam model files in '" + seeds_dir + "'");
    }

    std::vector<SeedMetrics> metrics;
    std::uint64_t first_digest = 0;
    for (const std::string& path : model_files) {
        LoadedModel m = load_model(path);
        const std::uint64_t digest = config_digest(m.config, m.ablation);
        if (metrics.empty())
            first_digest = digest;
        else if (digest != first_digest)
            throw ConfigMismatchError(path + ": config digest " + hex64(digest) +
                                      " differs from the first model's " + hex64(first_digest));
        metrics.push_back(evaluate(predict_dataset(data, vocab, m.params, m.config, m.ablation)));
    }
    MetricReport report = aggregate_seeds(metrics);

    const std::string text = render_report(report, ReportFormat::text);
    std::cout << text;
    if (!report_text.empty()) write_file_atomic(report_text, text);
    if (!report_json.empty()) write_file_atomic(report_json, render_report(report, ReportFormat::json));
    return kExitOk;
}

int cmd_score(const std::string& model_path, const std::string& vocab_path, const std::string& input_path) {
    require_file(model_path);
    require_file(vocab_path);
    require_file(input_path);
    LoadedModel m = load_model(model_path);
    SupPhoneVocab vocab = load_vocab(vocab_path);
    Dataset d = load_dataset(input_path, ScoreScale::normalized, m.config.max_len);
    if (d.utterances.size() != 1)
        throw ParseError(input_path + ": expected exactly 1 utterance, found " +
                         std::to_string(d.utterances.size()));
    const UtteranceEntry& u = d.utterances[0];
    UttPrediction pred = predict(u, vocab, d.manifest, m.params, m.config, m.ablation);

    json out;
    out["utt_id"] = u.utt_id;
    out["phones"] = pred.phone;
    json words = json::array();
    for (std::size_t w = 0; w < u.words.size(); ++w)
        words.push_back(json{{"accuracy", pred.word[0][w]}, {"stress", pred.word[1][w]}, {"total", pred.word[2][w]}});
    out["words"] = std::move(words);
    for (std::size_t a = 0; a < 5; ++a) out["utterance"][kUttAspects[a]] = pred.utt[a];
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t n_seeds, double inject_fault) {
    GradSuiteResult r = run_gradient_suite(seed, n_seeds, inject_fault);
    for (const GradSuiteCheck& c : r.checks) {
        std::cout << (c.pass ? "pass" : "FAIL") << "  " << c.name;
        for (std::size_t pad = c.name.size(); pad < 20; ++pad) std::cout << ' ';
        std::cout << "max rel err " << c.max_rel_err << " (tolerance " << c.tolerance << ")\n";
    }
    std::cout << (r.all_pass ? "all checks passed" : "CHECKS FAILED") << " (" << r.checks.size()
              << " checks, " << n_seeds << " seeds, " << r.elapsed_seconds << " s)\n";
    return r.all_pass ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical multi-aspect pronunciation assessment"};
    app.require_subcommand(1);

    std::string corpus_path, out_path;
    std::size_t vocab_size = 100;
    CLI::App* bpe = app.add_subcommand("bpe-train", "train a sup-phoneme vocabulary");
    bpe->add_option("--corpus", corpus_path, "dataset file (.jsonl)")->required();
    bpe->add_option("--vocab-size", vocab_size, "target vocabulary size");
    bpe->add_option("--out", out_path, "output vocabulary file")->required();

    std::size_t utterances = 100;
    std::uint64_t synth_seed = 1;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--utterances", utterances, "number of utterances");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--out", out_path, "output dataset file (.jsonl)")->required();

    TrainFlags fl;
    CLI::App* train_cmd = app.add_subcommand("train", "train one model per seed");
    train_cmd->add_option("--config", fl.config_path, "JSON config file ({\"model\": .., \"train\": ..})");
    train_cmd->add_option("--data", fl.data_path, "training dataset (.jsonl)")->required();
    train_cmd->add_option("--vocab", fl.vocab_path, "sup-phoneme vocabulary file")->required();
    train_cmd->add_option("--out", fl.out_path, "output directory (or .apam path for a single seed)")->required();
    train_cmd->add_option("--seeds", fl.seeds, "training seeds")->delimiter(',');
    train_cmd->add_option("--epochs", fl.epochs, "override epoch count");
    train_cmd->add_option("--batch-size", fl.batch_size, "override batch size");
    train_cmd->add_option("--lr0", fl.lr0, "override initial learning rate");
    train_cmd->add_option("--halve-every", fl.halve_every, "override halving period");
    train_cmd->add_option("--halve-after", fl.halve_after, "override last constant-lr epoch");
    train_cmd->add_option("--grad-clip", fl.grad_clip, "global gradient-norm cap (0 disables)");
    train_cmd->add_option("--dropout", fl.dropout, "override dropout rate");
    train_cmd->add_option("--ablate", fl.ablate, "drop a component (ds-conv, rel-pos, sup-phoneme)");

    std::string model_path, seeds_dir, data_path, vocab_path, report_json, report_text;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate one or more trained models");
    eval_cmd->add_option("--model", model_path, "a single model file");
    eval_cmd->add_option("--seeds-dir", seeds_dir, "directory of per-seed model files");
    eval_cmd->add_option("--data", data_path, "evaluation dataset (.jsonl)")->required();
    eval_cmd->add_option("--vocab", vocab_path, "sup-phoneme vocabulary file")->required();
    eval_cmd->add_option("--report-json", report_json, "write the JSON report here");
    eval_cmd->add_option("--report-text", report_text, "write the text report here");

    std::string score_model, score_vocab, score_input;
    CLI::App* score = app.add_subcommand("score", "score a single utterance");
    score->add_option("--model", score_model, "model file")->required();
    score->add_option("--vocab", score_vocab, "sup-phoneme vocabulary file")->required();
    score->add_option("--input", score_input, "single-utterance dataset file")->required();

    std::uint64_t gc_seed = 1;
    std::size_t gc_seeds = 10;
    double gc_fault = 0.0;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of all gradients");
    gradcheck->add_option("--seed", gc_seed, "base seed");
    gradcheck->add_option("--seeds", gc_seeds, "number of seeds");
    gradcheck->add_option("--inject-fault", gc_fault, "skew one backward pass to prove detection")
        ->default_val(0.0);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        if (bpe->parsed()) return cmd_bpe_train(corpus_path, vocab_size, out_path);
        if (synth->parsed()) return cmd_synth(utterances, synth_seed, out_path);
        if (train_cmd->parsed()) return cmd_train(fl);
        if (eval_cmd->parsed()) {
            if (model_path.empty() == seeds_dir.empty())
                throw ConfigError("eval: pass exactly one of --model or --seeds-dir");
            return cmd_eval(model_path, seeds_dir, data_path, vocab_path, report_json, report_text);
        }
        if (score->parsed()) return cmd_score(score_model, score_vocab, score_input);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_seeds, gc_fault);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitInput;
}
