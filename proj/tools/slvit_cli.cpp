// slvit: command-line front end for the experiment pipeline.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "slvit/experiment.hpp"

using namespace slvit;

namespace {

void emit(const Json& j) { std::cout << j.dump() << "\n"; }

void emit_all(const std::vector<Json>& v, const std::filesystem::path& file) {
    for (const auto& j : v) emit(j);
    write_file_atomic(file, to_jsonl(v));
}

std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-layer vision transformer early exits"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::simple);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::size_t repeat = 0;
    std::optional<std::size_t> stop_after;
    bool quiet = false;

    struct Verb {
        const char* name;
        const char* help;
    };
    const Verb verbs[] = {
        {"gen-data", "generate (or ingest) the dataset splits and write them as SLVT tensors"},
        {"train-backbone", "train and freeze the backbone, write its checkpoint"},
        {"train-branch", "train every configured exit for one repeat on the frozen backbone"},
        {"eval", "evaluate all exits of every family on the test split"},
        {"cost-report", "parameter/FLOP accounting and speedups per exit"},
        {"budgeted", "budgeted batch classification over the tau sweep"},
        {"anytime", "anytime prediction over the budget sweep"},
        {"copycat", "copycat fine-tuning of the transformer exits"},
        {"run", "the whole pipeline: backbone, repeats, policies, copycat, ablation, summary table"},
    };
    for (const auto& v : verbs) {
        CLI::App* sub = app.add_subcommand(v.name, v.help);
        sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "experiment seed (overrides the config)");
        sub->add_flag("--quiet", quiet, "no progress messages on stderr");
        const std::string n = v.name;
        if (n == "train-branch" || n == "eval" || n == "budgeted" || n == "anytime" || n == "copycat") {
            sub->add_option("--repeat", repeat, "repeat index (branch seeds derive from seed and repeat)");
        }
        if (n == "run") sub->add_option("--stop-after", stop_after, "stop after this many new jobs (resume later)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        if (seed) cfg.seed = *seed;
        Experiment ex(cfg, RunOptions{stop_after, quiet});
        const std::string verb = app.get_subcommands().front()->get_name();
        const auto& out = ex.output_dir();
        const std::string r = "_r" + std::to_string(repeat);
        if (repeat >= cfg.repeats && verb != "run" && verb != "gen-data" && verb != "cost-report") {
            throw ConfigError("--repeat " + std::to_string(repeat) + " is outside repeats=" +
                              std::to_string(cfg.repeats));
        }

        if (verb == "gen-data") {
            auto& d = ex.data();
            save_dataset(out / "data", "train", d.train);
            save_dataset(out / "data", "val", d.val);
            save_dataset(out / "data", "test", d.test);
            emit({{"record", "data"},
                  {"dir", (out / "data").string()},
                  {"train", d.train.size()},
                  {"val", d.val.size()},
                  {"test", d.test.size()},
                  {"provenance", d.train.provenance}});
        } else if (verb == "train-backbone") {
            ex.backbone();
            emit_all(ex.run_job_records("backbone"), out / "backbone.jsonl");
        } else if (verb == "train-branch") {
            std::vector<Json> recs;
            for (const auto& f : cfg.families) {
                ex.family_model(f, repeat);
                for (auto& j : ex.run_job_records(f + r)) recs.push_back(j);
            }
            emit_all(recs, out / ("branches" + r + ".jsonl"));
        } else if (verb == "eval") {
            std::vector<Json> recs;
            for (const auto& f : cfg.families) {
                auto m = ex.family_model(f, repeat);
                recs.push_back(ex.exits_record(m, f, repeat));
            }
            emit_all(recs, out / ("eval" + r + ".jsonl"));
        } else if (verb == "cost-report") {
            std::vector<Json> recs;
            for (const auto& f : cfg.families) recs.push_back(ex.cost_record(f));
            emit_all(recs, out / "cost_report.jsonl");
        } else if (verb == "budgeted") {
            std::vector<Json> recs;
            for (const auto& f : cfg.families) {
                auto m = ex.family_model(f, repeat);
                recs.push_back(ex.budgeted_record(m, f, repeat));
            }
            emit_all(recs, out / ("budgeted" + r + ".jsonl"));
        } else if (verb == "anytime") {
            std::vector<Json> recs;
            for (const auto& f : cfg.families) {
                auto m = ex.family_model(f, repeat);
                recs.push_back(ex.anytime_record(m, f, repeat));
            }
            emit_all(recs, out / ("anytime" + r + ".jsonl"));
        } else if (verb == "copycat") {
            emit_all(ex.copycat(repeat), out / ("copycat" + r + ".jsonl"));
        } else {
            const auto recs = ex.run();
            for (const auto& j : recs) {
                if (j.at("record") == "table" || j.at("record") == "impractical" ||
                    j.at("record") == "ablation_report" || j.at("record") == "copycat_report") {
                    emit(j);
                }
            }
        }
    } catch (const RunInterrupted& e) {
        std::cerr << "slvit: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "slvit: error: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
