// Acceptance suite: end-to-end checks on the default 48x48 toy configuration.
// Each criterion prints one PASS/FAIL line; the exit code is the number of
// failures.

#include "patchsim/costmodel.hpp"
#include "patchsim/io.hpp"
#include "patchsim/runtime.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace patchsim;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", id, what.c_str(),
                detail.c_str());
    if (!pass) ++failures;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

double range_of(const Tensor& t) {
    double lo = 1e300, hi = -1e300;
    for (float v : t.data) {
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
    }
    return hi - lo;
}

RunConfig base_config(RunMode mode, int devices, int steps, int warmup) {
    RunConfig cfg;  // default model: 4ch, base 16, 3 levels, 48x48
    cfg.mode = mode;
    cfg.n_devices = devices;
    cfg.num_steps = steps;
    cfg.warmup = warmup;
    return cfg;
}

struct TimedRun {
    RunResult result;
    double seconds = 0.0;
};

TimedRun timed_run(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    TimedRun r{run_sampling(cfg), 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

int main() {
    const CostParams cost;  // pinned acceptance profile:
    // 1000 MACs/us, 100 bytes/us, 5 us latency, 0.15 compute fraction

    // ---- shared runs -------------------------------------------------------
    std::printf("running the acceptance workloads (48x48 toy model)...\n");
    const TimedRun ref10 = timed_run(base_config(RunMode::Reference, 1, 10, 0));
    std::map<int, TimedRun> sync10;
    for (int n : {1, 2, 4}) sync10[n] = timed_run(base_config(RunMode::SyncPP, n, 10, 0));
    const TimedRun disp10_w4 = timed_run(base_config(RunMode::Displaced, 4, 10, 4));
    const TimedRun disp10_w0 = timed_run(base_config(RunMode::Displaced, 4, 10, 0));
    const TimedRun disp10_w2 = timed_run(base_config(RunMode::Displaced, 4, 10, 2));
    const TimedRun disp10_wfull = timed_run(base_config(RunMode::Displaced, 4, 10, 10));

    const TimedRun ref50 = timed_run(base_config(RunMode::Reference, 1, 50, 0));
    const TimedRun naive50 = timed_run(base_config(RunMode::NaivePatch, 4, 50, 0));
    const TimedRun disp50 = timed_run(base_config(RunMode::Displaced, 4, 50, 4));
    RunConfig stale_cfg = base_config(RunMode::Displaced, 4, 50, 4);
    stale_cfg.gn_scheme = GnScheme::Stale;
    const TimedRun disp50_stale = timed_run(stale_cfg);
    RunConfig separate_cfg = base_config(RunMode::Displaced, 4, 50, 4);
    separate_cfg.gn_scheme = GnScheme::Separate;
    const TimedRun disp50_separate = timed_run(separate_cfg);

    const double peak50 = range_of(ref50.result.x0);
    const double peak10 = range_of(ref10.result.x0);

    // ---- 1: SyncPP oracle equivalence --------------------------------------
    {
        double worst = 0.0, worst_time = 0.0;
        for (int n : {1, 2, 4}) {
            worst = std::max(worst, max_abs_diff(sync10[n].result.x0, ref10.result.x0));
            worst_time = std::max(worst_time, sync10[n].seconds);
        }
        report(1, worst <= 1e-5 && worst_time < 30.0,
               "sync-pp matches reference for N in {1,2,4}",
               "max|diff|=" + fmt(worst) + " <= 1e-5, slowest run " + fmt(worst_time) + "s");
    }

    // ---- 2: mode-collapse chain ---------------------------------------------
    {
        const bool bitwise =
            disp10_wfull.result.x0.data == sync10[4].result.x0.data;

        // zero staleness: feed the same (x, t) twice, then compare one
        // displaced step against a fresh synchronous step
        const Model model = build_model(ModelConfig{}, 42);
        const Condition cond = random_condition(8, 7);
        const Tensor x = random_normal(1, 4, 48, 48, 1234);
        PatchRunner displaced(model, cond, 48, 48, {RunMode::Displaced, 4});
        (void)displaced.step_sync(x, 700, 0);
        const Tensor eps_disp = displaced.step_displaced(x, 700, 1);
        PatchRunner sync(model, cond, 48, 48, {RunMode::SyncPP, 4});
        const Tensor eps_sync = sync.step_sync(x, 700, 0);
        const double dev = max_abs_diff(eps_disp, eps_sync);

        report(2, bitwise && dev <= 1e-5, "mode-collapse chain",
               std::string("warmup>=steps bit-identical: ") + (bitwise ? "yes" : "NO") +
                   ", zero-staleness step max|diff|=" + fmt(dev));
    }

    // ---- 3: quality ordering --------------------------------------------------
    {
        const double psnr_disp = psnr(disp50.result.x0, ref50.result.x0, peak50);
        const double psnr_naive = psnr(naive50.result.x0, ref50.result.x0, peak50);
        report(3, psnr_disp >= psnr_naive + 3.0,
               "displaced beats naive patch by >= 3 dB on the 50-step run",
               "displaced " + fmt(psnr_disp) + " dB vs naive " + fmt(psnr_naive) + " dB");
    }

    // ---- 4: warm-up effect ----------------------------------------------------
    {
        const double p0 = psnr(disp10_w0.result.x0, ref10.result.x0, peak10);
        const double p2 = psnr(disp10_w2.result.x0, ref10.result.x0, peak10);
        report(4, p2 >= p0, "2-step warm-up does not regress PSNR on the 10-step run",
               "warmup=2: " + fmt(p2) + " dB vs warmup=0: " + fmt(p0) + " dB");
    }

    // ---- 5: GN correction ------------------------------------------------------
    {
        GnStats local(1, 4), global(1, 4);
        for (int g = 0; g < 4; ++g) {
            local.mean[g] = 0.1 * g - 0.05;
            local.mean_sq[g] = 1.0 + 0.2 * g;
            global.mean[g] = 0.07 * g;
            global.mean_sq[g] = 1.1 + 0.15 * g;
        }
        const GnStats corrected = corrected_gn_stats(local, local, global);
        const bool exact = corrected.mean == global.mean && corrected.mean_sq == global.mean_sq;

        const double pc = psnr(disp50.result.x0, ref50.result.x0, peak50);
        const double ps = psnr(disp50_stale.result.x0, ref50.result.x0, peak50);
        const double pp = psnr(disp50_separate.result.x0, ref50.result.x0, peak50);
        report(5, exact && pc >= ps && pc >= pp,
               "corrected GN is exact at zero staleness and orders the schemes",
               std::string("zero-staleness exact: ") + (exact ? "yes" : "NO") + ", corrected " +
                   fmt(pc) + " dB >= stale " + fmt(ps) + " dB, separate " + fmt(pp) + " dB");
    }

    // ---- 6: communication accounting -------------------------------------------
    {
        const uint64_t v_sync = sync10[4].result.volumes.total_recv();
        const uint64_t v_disp = disp10_w4.result.volumes.total_recv();
        const Model model = build_model(ModelConfig{}, 42);
        const double pp_est = double(pp_volume_estimate(model, 48, 48, 4));
        const double tp_est = double(tp_volume_estimate(model, 48, 48, 4));
        const double ratio = pp_est / tp_est;
        report(6, v_sync == v_disp && ratio < 0.5,
               "displaced volume equals sync-pp exactly; analytic PP/TP < 1/2",
               "bytes " + std::to_string(v_disp) + " == " + std::to_string(v_sync) +
                   ", ratio " + fmt(ratio));
    }

    // ---- 7: overlap property ------------------------------------------------------
    {
        const Model model = build_model(ModelConfig{}, 42);
        // precondition: largest per-layer transfer <= 50% of per-step compute
        const uint64_t step_macs = model_total_macs(model, 48, 48) / 4;
        const double step_compute_us = double(step_macs) / cost.compute_rate;
        double worst_transfer_us = 0.0;
        for (const LayerDescriptor& d : layer_graph(model)) {
            if (!d.needs_gather()) continue;
            const int lh = 48 / d.scale_in, lw = 48 / d.scale_in;
            const uint64_t bytes =
                uint64_t(d.in_ch) * lh * lw * sizeof(float) * 3 / 4;  // (N-1)/N share
            worst_transfer_us =
                std::max(worst_transfer_us, double(bytes) / cost.link_bandwidth +
                                                cost.link_latency);
        }
        const bool precondition = worst_transfer_us <= 0.5 * step_compute_us;

        const SimResult sim_disp = simulate_timeline(disp10_w4.result.trace, cost);
        const SimResult sim_sync = simulate_timeline(sync10[4].result.trace, cost);
        double displaced_phase_stall = 0.0;
        for (const TimelineEvent& e : sim_disp.events)
            if (e.kind == TimelineKind::Stall && e.step >= 5)  // past first + 4 warm-up
                displaced_phase_stall += e.end - e.start;
        const bool hidden = displaced_phase_stall == 0.0;
        const bool faster = sim_disp.makespan_us <= 0.9 * sim_sync.makespan_us;
        report(7, precondition && hidden && faster,
               "async transfers fully hidden; displaced >= 10% faster than sync-pp",
               "max transfer " + fmt(worst_transfer_us) + "us of " +
                   fmt(0.5 * step_compute_us) + "us budget, displaced-phase stall " +
                   fmt(displaced_phase_stall) + "us, makespan " + fmt(sim_disp.makespan_us) +
                   " vs " + fmt(sim_sync.makespan_us) + "us");
    }

    // ---- 8: input similarity --------------------------------------------------------
    {
        const double r50 = ref50.result.similarity.ratio();
        const double r10 = ref10.result.similarity.ratio();
        report(8, r50 < 0.05 && r50 < r10,
               "consecutive-step inputs are similar; 50-step ratio below the 10-step one",
               "50-step " + fmt(100.0 * r50) + "% (< 5%), 10-step " + fmt(100.0 * r10) + "%");
    }

    // ---- 9: per-device compute -----------------------------------------------------
    {
        const Model model = build_model(ModelConfig{}, 42);
        const uint64_t full = model_total_macs(model, 48, 48);
        bool exact = full % 4 == 0;
        for (const auto& step : disp10_w4.result.step_device_macs)
            for (uint64_t dev : step) exact = exact && dev == full / 4;
        report(9, exact, "fresh-region MACs per device are exactly total/N every step",
               "total " + std::to_string(full) + ", per device " + std::to_string(full / 4));
    }

    // ---- 10: determinism -------------------------------------------------------------
    {
        const fs::path dir = fs::temp_directory_path() / "patchsim_acceptance_det";
        fs::remove_all(dir);
        const std::vector<std::string> common = {
            "--mode", "displaced", "--devices", "4",  "--size", "48x48",
            "--steps", "10",       "--warmup",  "4"};
        auto invoke = [&](const std::string& out, bool stress) {
            std::vector<std::string> args = common;
            if (stress) args.push_back("--stress-sched");
            args.push_back("--out");
            args.push_back((dir / out).string());
            return cli_run(args);
        };
        bool ok = invoke("a", false) == 0 && invoke("b", false) == 0 &&
                  invoke("c", true) == 0 && invoke("d", true) == 0;
        std::string detail = ok ? "artifacts byte-identical across repeats and stress mode"
                                : "cli invocation failed";
        if (ok) {
            for (const char* f :
                 {"x0.tnsr", "x0.pgm", "metrics.csv", "trace.txt", "trajectory.tnsr"}) {
                const std::string a = slurp((dir / "a" / f).string());
                ok = ok && !a.empty() && a == slurp((dir / "b" / f).string()) &&
                     a == slurp((dir / "c" / f).string()) &&
                     a == slurp((dir / "d" / f).string());
                if (!ok) {
                    detail = std::string("mismatch in ") + f;
                    break;
                }
            }
        }
        fs::remove_all(dir);
        report(10, ok, "identical CLI invocations are byte-identical (incl. stress mode)",
               detail);
    }

    std::printf("%d of 10 criteria passed\n", 10 - failures);
    return failures;
}
