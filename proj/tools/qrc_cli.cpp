// Command-line interface: corpus generation, training, evaluation,
// prediction dumps, the finite-difference gradient suite, and the
// ablation/sweep harness.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "qrc/qrc.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

qrc::TrainConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream in(path);
    if (!in) throw qrc::DataError("cannot open config: " + path);
    qrc::TrainConfig cfg = nlohmann::json::parse(in).get<qrc::TrainConfig>();
    cfg.validate();
    return cfg;
}

void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw qrc::DataError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

int cmd_gen_data(std::uint64_t seed, int n, const std::string& out_path) {
    qrc::GenConfig gen;
    qrc::Vocab vocab;
    auto corpus = qrc::generate_corpus(seed, n, gen, vocab);
    qrc::write_corpus(corpus, out_path);
    long queries = 0;
    for (const auto& ex : corpus) queries += static_cast<long>(ex.phrases.size());
    std::cout << "wrote " << corpus.size() << " examples (" << queries << " queries) to "
              << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path, std::string log_path) {
    qrc::TrainConfig cfg = load_config(config_path);
    auto corpus = qrc::read_corpus(data_path);
    if (log_path.empty()) log_path = out_path + ".log.jsonl";
    std::ofstream log(log_path);
    if (!log) throw qrc::DataError("cannot open log for writing: " + log_path);

    auto state = qrc::build_state<float>(cfg);
    qrc::alternating_schedule(state, corpus, [&](const qrc::StepLog& s) {
        log << nlohmann::json({{"step", s.step},
                               {"phase", s.phase},
                               {"L_gen", s.losses.l_gen},
                               {"L_cls", s.losses.l_cls},
                               {"L_reg", s.losses.l_reg},
                               {"L_rwd", s.losses.l_rwd},
                               {"F_mean", s.losses.f_mean},
                               {"R_mean", s.losses.r_mean}})
                   .dump()
            << "\n";
    });
    qrc::save_checkpoint(state, out_path);
    std::cout << "trained " << state.step << " steps (" << state.skipped_queries
              << " skipped queries, " << state.nan_steps << " aborted steps); checkpoint at "
              << out_path << "\n";
    if (state.nan_steps > 0) return kExitNumeric;
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const std::string& report_path,
             const std::string& split_name) {
    std::vector<std::string> warnings;
    auto state = qrc::load_checkpoint<float>(ckpt, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    auto corpus = qrc::read_corpus(data_path);
    qrc::Split split = split_name == "train" ? qrc::Split::Train
                       : split_name == "val" ? qrc::Split::Val
                                             : qrc::Split::Test;
    qrc::EvalReport report = qrc::evaluate(state, corpus, split);
    write_json(nlohmann::json(report), report_path);
    std::cout << "accuracy " << report.accuracy << "  ubp " << report.ubp << "  bpg " << report.bpg
              << "  over " << report.n_queries << " queries\n";
    return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& data_path, const std::string& out_path,
                long query_index) {
    std::vector<std::string> warnings;
    auto state = qrc::load_checkpoint<float>(ckpt, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    auto corpus = qrc::read_corpus(data_path);

    std::ofstream out(out_path);
    if (!out) throw qrc::DataError("cannot open for writing: " + out_path);
    long index = 0;
    long written = 0;
    for (const auto& ex : corpus) {
        auto proposals = qrc::propose(state, ex);
        auto features = qrc::feature_matrix(proposals);
        for (const auto& phrase : ex.phrases) {
            if (query_index >= 0 && index++ != query_index) continue;
            auto qp = qrc::predict_query(state, ex, proposals, features, phrase);
            out << nlohmann::json({{"query", qp.text},
                                   {"proposal_box", qrc::box_to_json(qp.proposal_box)},
                                   {"regressed_box", qrc::box_to_json(qp.regressed_box)},
                                   {"gt_box", qrc::box_to_json(qp.gt_box)}})
                       .dump()
                << "\n";
            ++written;
        }
        if (query_index >= 0 && written > 0) break;
    }
    if (query_index >= 0 && written == 0)
        throw qrc::DataError("query index out of range: " + std::to_string(query_index));
    std::cout << "wrote " << written << " predictions to " << out_path << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& only_op, std::uint64_t seed, int points) {
    constexpr double kTol = 1e-4;
    bool failed = false;
    auto reports = qrc::gradsuite::run_op_suite(seed, points);
    for (const auto& r : reports) {
        if (!only_op.empty() && r.op != only_op) continue;
        bool ok = r.max_rel_err < kTol;
        failed = failed || !ok;
        std::printf("%-18s max rel err %.3e  [%s]\n", r.op.c_str(), r.max_rel_err,
                    ok ? "ok" : "FAIL");
    }
    if (only_op.empty() || only_op == "composite") {
        auto comp = qrc::gradsuite::composite_grad_check(seed);
        bool ok = comp.max_rel_err < kTol;
        failed = failed || !ok;
        std::printf("%-18s max rel err %.3e  over %d coords (worst: %s)  [%s]\n", "composite",
                    comp.max_rel_err, comp.coords, comp.worst_param.c_str(), ok ? "ok" : "FAIL");
    }
    return failed ? kExitNumeric : 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_path,
               const std::string& out_path, int variant_seeds, int sweep_seeds,
               std::size_t sweep_cap) {
    qrc::TrainConfig cfg = load_config(config_path);
    auto corpus = qrc::read_corpus(data_path);
    auto report = qrc::ablation_suite<float>(corpus, cfg, variant_seeds, sweep_seeds, sweep_cap,
                                             [](const std::string& msg) { std::cerr << msg << "\n"; });
    write_json(qrc::to_json(report), out_path);
    std::cout << qrc::format_table(report);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic phrase-grounding trainer (proposal generation + query-guided "
                 "regression + context policy)"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic grounding corpus");
    std::uint64_t gen_seed = 0;
    int gen_n = 1000;
    std::string gen_out;
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--n", gen_n, "number of examples")->required();
    gen->add_option("--out", gen_out, "output JSONL path")->required();

    auto* train = app.add_subcommand("train", "train on a corpus");
    std::string train_config, train_data, train_out, train_log;
    train->add_option("--config", train_config, "config JSON (defaults when omitted)");
    train->add_option("--data", train_data, "corpus JSONL")->required();
    train->add_option("--out", train_out, "checkpoint output path")->required();
    train->add_option("--log", train_log, "metric log JSONL path");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_report, eval_split = "test";
    eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "corpus JSONL")->required();
    eval->add_option("--report", eval_report, "report JSON output")->required();
    eval->add_option("--split", eval_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));

    auto* predict = app.add_subcommand("predict", "dump per-query predictions");
    std::string pred_ckpt, pred_data, pred_out;
    long pred_index = -1;
    predict->add_option("--ckpt", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--data", pred_data, "corpus JSONL")->required();
    predict->add_option("--out", pred_out, "output JSONL")->required();
    predict->add_option("--query-index", pred_index, "single query index (all when omitted)");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::string gc_op;
    std::uint64_t gc_seed = 12345;
    int gc_points = 50;
    gradcheck->add_option("--op", gc_op, "check a single op (or 'composite')");
    gradcheck->add_option("--seed", gc_seed, "suite seed");
    gradcheck->add_option("--points", gc_points, "random points per op");

    auto* ablate = app.add_subcommand("ablate", "variant ladder + hyperparameter sweeps");
    std::string ab_config, ab_data, ab_out;
    int ab_vseeds = 5, ab_sseeds = 2;
    std::size_t ab_cap = 2000;
    ablate->add_option("--config", ab_config, "base config JSON");
    ablate->add_option("--data", ab_data, "corpus JSONL")->required();
    ablate->add_option("--out", ab_out, "report JSON output")->required();
    ablate->add_option("--variant-seeds", ab_vseeds, "seeds per variant row");
    ablate->add_option("--sweep-seeds", ab_sseeds, "seeds per sweep cell");
    ablate->add_option("--sweep-cap", ab_cap, "corpus cap for sweep cells");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_seed, gen_n, gen_out);
        if (train->parsed()) return cmd_train(train_config, train_data, train_out, train_log);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_report, eval_split);
        if (predict->parsed()) return cmd_predict(pred_ckpt, pred_data, pred_out, pred_index);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_op, gc_seed, gc_points);
        if (ablate->parsed())
            return cmd_ablate(ab_config, ab_data, ab_out, ab_vseeds, ab_sseeds, ab_cap);
    } catch (const qrc::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const qrc::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitData;
    } catch (const qrc::GenerationError& e) {
        std::cerr << "generation error: " << e.what() << "\n";
        return kExitData;
    } catch (const qrc::ContractError& e) {
        std::cerr << "invalid request: " << e.what() << "\n";
        return kExitData;
    } catch (const qrc::MetricError& e) {
        std::cerr << "metric error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitUsage;
}
