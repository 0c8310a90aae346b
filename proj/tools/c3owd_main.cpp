#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "c3owd/bench.hpp"
#include "c3owd/biwkv.hpp"
#include "c3owd/contrast.hpp"
#include "c3owd/curriculum.hpp"
#include "c3owd/ema.hpp"
#include "c3owd/gradcheck_suite.hpp"
#include "c3owd/report.hpp"
#include "c3owd/tensor.hpp"

namespace {

using namespace c3owd;
using nlohmann::json;

constexpr int kExitPass = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

void write_output(const std::string& payload, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << payload;
        if (payload.empty() || payload.back() != '\n') std::cout << '\n';
        return;
    }
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot open output path " + out_path);
    f << payload;
    if (payload.empty() || payload.back() != '\n') f << '\n';
    if (!f) throw std::runtime_error("write failed for " + out_path);
}

RunManifest make_manifest(const std::string& command,
                          const std::map<std::string, std::string>& flags, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.flags = flags;
    m.seed = seed;
    m.started_at = iso_timestamp_now();
    return m;
}

int cmd_oracle(const std::string& op, Index trials, Index tmax, Index cmax, std::uint64_t seed,
               const std::string& out_path) {
    if (op != "biwkv") throw InvalidArgument("oracle: unknown --op " + op);
    RunManifest manifest = make_manifest(
        "oracle",
        {{"op", op},
         {"trials", std::to_string(trials)},
         {"tmax", std::to_string(tmax)},
         {"cmax", std::to_string(cmax)}},
        seed);

    Rng root(seed);
    double max_rel = 0.0;
    for (Index trial = 0; trial < trials; ++trial) {
        Rng rng = root.split(static_cast<std::uint64_t>(trial));
        const Index t_len = 1 + static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(tmax)));
        const Index c = 1 + static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(cmax)));
        const Matd k = rng.uniform_mat(t_len, c, -3.0, 3.0);
        const Matd v = rng.uniform_mat(t_len, c, -3.0, 3.0);
        const Vecd w = rng.uniform_vec(c, -3.0, 3.0);
        const Vecd u = rng.uniform_vec(c, -3.0, 3.0);
        const Matd a = biwkv_naive<double>(k, v, w, u);
        const Matd b = biwkv_scan<double>(k, v, w, u);
        for (Index i = 0; i < a.rows(); ++i)
            for (Index j = 0; j < a.cols(); ++j) {
                const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-300});
                max_rel = std::max(max_rel, std::abs(a(i, j) - b(i, j)) / denom);
            }
    }
    const bool pass = max_rel <= 1e-10;
    manifest.finished_at = iso_timestamp_now();
    json j;
    j["manifest"] = manifest.to_json();
    j["trials"] = trials;
    j["max_rel_err"] = max_rel;
    j["pass"] = pass;
    write_output(j.dump(2), out_path);
    return pass ? kExitPass : kExitCheckFailure;
}

int cmd_gradcheck(const std::string& module, Index instances, std::uint64_t seed, bool corrupt,
                  const std::string& out_path) {
    RunManifest manifest = make_manifest(
        "gradcheck",
        {{"module", module}, {"instances", std::to_string(instances)}, {"corrupt", corrupt ? "1" : "0"}},
        seed);
    GradSuiteConfig cfg;
    cfg.instances = instances;
    cfg.seed = seed;
    cfg.corrupt = corrupt;
    const std::vector<GradReport> reports = run_gradcheck(module, cfg);
    manifest.finished_at = iso_timestamp_now();

    std::ostringstream out;
    out << json{{"manifest", manifest.to_json()}}.dump() << '\n';
    bool pass = true;
    for (const auto& r : reports) {
        const bool op_pass = r.max_rel_err <= 1e-5;
        pass = pass && op_pass;
        out << json{{"op_name", r.op_name},
                    {"param_name", r.param_name},
                    {"max_rel_err", r.max_rel_err},
                    {"pass", op_pass}}
                   .dump()
            << '\n';
    }
    write_output(out.str(), out_path);
    return pass ? kExitPass : kExitCheckFailure;
}

int cmd_bench(const std::string& op, const std::string& sizes_csv, Index channels, int reps,
              std::uint64_t seed, const std::string& out_path) {
    if (op != "biwkv") throw InvalidArgument("bench: unknown --op " + op);
    std::vector<Index> sizes;
    {
        std::stringstream ss(sizes_csv);
        std::string part;
        while (std::getline(ss, part, ',')) sizes.push_back(static_cast<Index>(std::stoll(part)));
    }
    if (sizes.empty()) throw InvalidArgument("bench: --sizes must name at least one size");
    RunManifest manifest = make_manifest(
        "bench",
        {{"op", op}, {"sizes", sizes_csv}, {"channels", std::to_string(channels)},
         {"reps", std::to_string(reps)}},
        seed);
    const std::vector<BenchRow> rows = bench_biwkv(sizes, channels, reps, seed);
    manifest.finished_at = iso_timestamp_now();

    std::ostringstream out;
    out << "# manifest " << manifest.to_json().dump() << '\n';
    out << "T,scan_ms,naive_ms\n";
    for (const auto& r : rows) out << r.t_len << ',' << r.scan_ms << ',' << r.naive_ms << '\n';
    write_output(out.str(), out_path);
    return kExitPass;
}

int cmd_ema_verify(Index trials, Index steps, Index dim, double momentum, Index gap_trials,
                   std::uint64_t seed, const std::string& out_path) {
    RunManifest manifest = make_manifest(
        "ema-verify",
        {{"trials", std::to_string(trials)},
         {"steps", std::to_string(steps)},
         {"dim", std::to_string(dim)},
         {"momentum", std::to_string(momentum)},
         {"gap_trials", std::to_string(gap_trials)}},
        seed);

    LagTrialConfig lag_cfg;
    lag_cfg.trials = trials;
    lag_cfg.steps = steps;
    lag_cfg.dim = dim;
    lag_cfg.m = momentum;
    lag_cfg.seed = seed;
    const LagTrialReport lag = run_lag_trials(lag_cfg);

    LossGapTrialConfig gap_cfg;
    gap_cfg.trials = gap_trials;
    gap_cfg.m = momentum;
    gap_cfg.seed = seed;
    const LossGapTrialReport gap = run_loss_gap_trials(gap_cfg);

    manifest.finished_at = iso_timestamp_now();
    json j;
    j["manifest"] = manifest.to_json();
    j["trials"] = lag.trials + gap.trials;
    j["violations"] = lag.violations + gap.violations;
    j["max_ratio_lag"] = std::max(lag.max_ratio, gap.max_ratio_lag);
    j["max_ratio_loss_gap"] = gap.max_ratio_gap;
    write_output(j.dump(2), out_path);
    return (lag.violations + gap.violations) == 0 ? kExitPass : kExitCheckFailure;
}

int cmd_contrast_demo(Index steps, Index queue_size, double momentum, std::uint64_t seed,
                      const std::string& out_path) {
    RunManifest manifest = make_manifest(
        "contrast-demo",
        {{"steps", std::to_string(steps)},
         {"queue_size", std::to_string(queue_size)},
         {"momentum", std::to_string(momentum)}},
        seed);

    const Index d_in = 8, hidden = 12, d_proj = 8, classes = 4;
    Rng root(seed);
    Rng rng_state = root.split(0);
    ContrastState state(d_in, hidden, d_proj, queue_size, rng_state);
    state.m = momentum;

    std::ostringstream out;
    for (Index step = 0; step < steps; ++step) {
        Rng rng = root.split(1 + static_cast<std::uint64_t>(step));
        ContrastBatch batch;
        const Index n_r = 3 + static_cast<Index>(rng.next_below(3));
        batch.region_feats = rng.gaussian(n_r, d_in);
        std::vector<int> present;
        for (Index i = 0; i < n_r; ++i) {
            const int cls = static_cast<int>(rng.next_below(classes));
            batch.region_classes.push_back(cls);
            if (std::find(present.begin(), present.end(), cls) == present.end()) present.push_back(cls);
        }
        std::sort(present.begin(), present.end());
        batch.text_feats = rng.gaussian(static_cast<Index>(present.size()), d_in);
        batch.text_classes = present;

        const ContrastStepResult res = contrastive_step(batch, state);
        out << json{{"step", step},
                    {"loss_i2t", res.loss_i2t},
                    {"loss_t2i", res.loss_t2i},
                    {"queue_fill", state.q_region.fill()},
                    {"theta_lag_norm", res.theta_lag_norm}}
                   .dump()
            << '\n';
    }
    manifest.finished_at = iso_timestamp_now();
    std::ostringstream full;
    full << json{{"manifest", manifest.to_json()}}.dump() << '\n' << out.str();
    write_output(full.str(), out_path);
    return kExitPass;
}

int cmd_train_demo(const std::string& config_path, std::uint64_t seed, const std::string& out_path) {
    RunManifest manifest = make_manifest("train-demo", {{"config", config_path}}, seed);
    CurriculumConfig cfg;
    if (!config_path.empty()) cfg = config_from_json_file(config_path);
    const CurriculumReport rep = run_curriculum(cfg, seed);
    manifest.finished_at = iso_timestamp_now();

    json j = json::parse(curriculum_report_to_json(rep));
    j["manifest"] = manifest.to_json();
    write_output(j.dump(2), out_path);
    return rep.pass ? kExitPass : kExitCheckFailure;
}

int cmd_dump(const std::string& in_path, const std::string& shape_spec, std::uint64_t seed,
             const std::string& out_path) {
    if (out_path.empty()) throw InvalidArgument("dump: --out PATH is required");
    if (!in_path.empty()) {
        write_tensor_csv(read_tensor_csv(in_path), out_path);
        return kExitPass;
    }
    if (shape_spec.empty()) throw InvalidArgument("dump: provide --in or --shape");
    std::vector<Index> shape;
    std::stringstream ss(shape_spec);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        if (part.empty()) throw InvalidArgument("dump: malformed --shape");
        shape.push_back(static_cast<Index>(std::stoll(part)));
    }
    Tensor t(shape);
    Rng rng(seed);
    for (Index i = 0; i < t.size(); ++i) t.data()(i) = rng.normal();
    write_tensor_csv(t, out_path);
    return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"C3-OWD verification toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string out_path;
    std::uint64_t seed = 0;
    app.add_option("--out", out_path, "Write the report to PATH instead of stdout");
    app.add_option("--seed", seed, "Base seed (env C3_SEED overrides)");

    auto* oracle = app.add_subcommand("oracle", "Kernel equivalence oracle");
    std::string oracle_op = "biwkv";
    Index trials = 1000, tmax = 64, cmax = 8;
    oracle->add_option("--op", oracle_op);
    oracle->add_option("--trials", trials);
    oracle->add_option("--tmax", tmax);
    oracle->add_option("--cmax", cmax);

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    std::string module = "all";
    Index instances = 20;
    bool corrupt = false;
    gradcheck->add_option("--module", module);
    gradcheck->add_option("--instances", instances);
    gradcheck->add_flag("--corrupt", corrupt, "Damage one analytic gradient (failure fixture)");

    auto* bench = app.add_subcommand("bench", "Kernel scaling benchmark");
    std::string bench_op = "biwkv", sizes = "1024,2048,4096,8192";
    Index channels = 4;
    int reps = 5;
    bench->add_option("--op", bench_op);
    bench->add_option("--sizes", sizes);
    bench->add_option("--channels", channels);
    bench->add_option("--reps", reps);

    auto* ema = app.add_subcommand("ema-verify", "EMA lag and loss-gap bounds");
    Index ema_trials = 100, ema_steps = 1000, ema_dim = 50, gap_trials = 5;
    double ema_m = 0.9;
    ema->add_option("--trials", ema_trials);
    ema->add_option("--steps", ema_steps);
    ema->add_option("--dim", ema_dim);
    ema->add_option("--momentum", ema_m);
    ema->add_option("--gap-trials", gap_trials);

    auto* cdemo = app.add_subcommand("contrast-demo", "Momentum-contrast queue demo");
    Index demo_steps = 20, queue_size = 4096;
    double demo_m = 0.999;
    cdemo->add_option("--steps", demo_steps);
    cdemo->add_option("--queue-size", queue_size);
    cdemo->add_option("--momentum", demo_m);

    auto* tdemo = app.add_subcommand("train-demo", "Two-stage curriculum demo");
    std::string config_path;
    tdemo->add_option("--config", config_path);

    auto* dump = app.add_subcommand("dump", "Tensor CSV writer / round-trip");
    std::string dump_in, dump_shape;
    dump->add_option("--in", dump_in);
    dump->add_option("--shape", dump_shape);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitPass : kExitUsage;
    }

    try {
        const std::uint64_t s = c3owd::effective_seed(seed);
        if (oracle->parsed()) return cmd_oracle(oracle_op, trials, tmax, cmax, s, out_path);
        if (gradcheck->parsed()) return cmd_gradcheck(module, instances, s, corrupt, out_path);
        if (bench->parsed()) return cmd_bench(bench_op, sizes, channels, reps, s, out_path);
        if (ema->parsed()) return cmd_ema_verify(ema_trials, ema_steps, ema_dim, ema_m, gap_trials, s, out_path);
        if (cdemo->parsed()) return cmd_contrast_demo(demo_steps, queue_size, demo_m, s, out_path);
        if (tdemo->parsed()) return cmd_train_demo(config_path, s, out_path);
        if (dump->parsed()) return cmd_dump(dump_in, dump_shape, s, out_path);
        std::cerr << "unknown subcommand\n";
        return kExitUsage;
    } catch (const c3owd::InvalidArgument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const c3owd::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    }
}
