#include "patchsim/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace patchsim {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {(unsigned char)(v & 0xFF), (unsigned char)((v >> 8) & 0xFF),
                                (unsigned char)((v >> 16) & 0xFF),
                                (unsigned char)((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

void write_tnsr(const Tensor& x, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_tnsr: cannot open " + path);
    os.write("TNSR", 4);
    const char version = 1;
    os.write(&version, 1);
    put_u32(os, 4);
    put_u32(os, uint32_t(x.n));
    put_u32(os, uint32_t(x.c));
    put_u32(os, uint32_t(x.h));
    put_u32(os, uint32_t(x.w));
    for (float v : x.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
    }
    if (!os) throw std::runtime_error("write_tnsr: write failed for " + path);
}

Tensor read_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_tnsr: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0)
        throw std::runtime_error("read_tnsr: bad magic in " + path);
    char version = 0;
    is.read(&version, 1);
    if (version != 1) throw std::runtime_error("read_tnsr: unsupported version in " + path);
    const uint32_t ndim = get_u32(is);
    if (ndim != 4) throw std::runtime_error("read_tnsr: expected 4 dims in " + path);
    uint32_t dims[4];
    for (auto& d : dims) d = get_u32(is);
    Tensor out{int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3])};
    for (auto& v : out.data) {
        const uint32_t bits = get_u32(is);
        std::memcpy(&v, &bits, 4);
    }
    if (!is) throw std::runtime_error("read_tnsr: payload shorter than dims in " + path);
    out.require_finite("read_tnsr");
    return out;
}

void write_pgm(const Tensor& x, const std::string& path, double lo, double hi) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
    os << "P5\n" << x.w << " " << x.n * x.c * x.h << "\n255\n";
    const double range = hi - lo;
    for (int in = 0; in < x.n; ++in)
        for (int ic = 0; ic < x.c; ++ic)
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix) {
                    unsigned char byte = 128;
                    if (range > 0.0) {
                        double t = (double(x.at(in, ic, iy, ix)) - lo) / range;
                        t = std::min(1.0, std::max(0.0, t));
                        byte = (unsigned char)(std::floor(t * 255.0 + 0.5));
                    }
                    os.write(reinterpret_cast<const char*>(&byte), 1);
                }
    if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

CostParams parse_cost_profile(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cost profile: cannot open " + path);
    CostParams p;
    std::string line;
    while (std::getline(is, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("cost profile: expected 'key = value', got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const double value = std::stod(trim(t.substr(eq + 1)));
        if (key == "compute_rate") p.compute_rate = value;
        else if (key == "link_bandwidth") p.link_bandwidth = value;
        else if (key == "link_latency") p.link_latency = value;
        else if (key == "comm_uses_compute_fraction") p.comm_uses_compute_fraction = value;
        else throw std::invalid_argument("cost profile: unknown key '" + key + "'");
    }
    p.validate();
    return p;
}

void dump_weights(const Model& m, const std::string& path) {
    std::size_t total = 0;
    for (const Tensor& t : m.weights) total += t.size();
    Tensor flat(1, 1, 1, int(total));
    std::size_t offset = 0;
    for (const Tensor& t : m.weights) {
        std::copy(t.data.begin(), t.data.end(), flat.data.begin() + offset);
        offset += t.size();
    }
    write_tnsr(flat, path);
}

void load_weights(Model& m, const std::string& path) {
    const Tensor flat = read_tnsr(path);
    std::size_t total = 0;
    for (const Tensor& t : m.weights) total += t.size();
    if (flat.size() != total)
        throw std::invalid_argument("load_weights: file holds " + std::to_string(flat.size()) +
                                    " values, model expects " + std::to_string(total));
    std::size_t offset = 0;
    for (Tensor& t : m.weights) {
        std::copy(flat.data.begin() + offset, flat.data.begin() + offset + t.size(),
                  t.data.begin());
        offset += t.size();
    }
}

// ---- experiment execution ------------------------------------------------------

ExperimentOutcome execute_experiment(const ExperimentConfig& cfg, const Tensor* reference) {
    ExperimentOutcome out;
    out.run = run_sampling(cfg.run);
    out.sim = simulate_timeline(out.run.trace, cfg.cost);

    uint64_t per_dev = 0;
    const int n_dev = int(out.run.trace.n_devices);
    for (int d = 0; d < n_dev; ++d) {
        uint64_t dev_total = 0;
        for (const auto& step : out.run.step_device_macs)
            if (d < int(step.size())) dev_total += step[d];
        per_dev = std::max(per_dev, dev_total);
    }
    out.per_device_macs = per_dev;

    const Model model = build_model(cfg.run.model, cfg.run.model_seed);
    out.pp_estimate = pp_volume_estimate(model, cfg.run.h, cfg.run.w, cfg.run.n_devices);
    out.tp_estimate = tp_volume_estimate(model, cfg.run.h, cfg.run.w, cfg.run.n_devices);

    Tensor ref_loaded;
    const Tensor* ref = reference;
    if (!ref && !cfg.compare_against.empty()) {
        ref_loaded = read_tnsr(cfg.compare_against);
        ref = &ref_loaded;
    }
    if (ref) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (float v : ref->data) {
            lo = std::min(lo, double(v));
            hi = std::max(hi, double(v));
        }
        out.psnr_peak = hi - lo;
        out.psnr_db = psnr(out.run.x0, *ref, out.psnr_peak);
        out.has_psnr = true;
    }
    return out;
}

ExperimentOutcome execute_experiment(const ExperimentConfig& cfg) {
    return execute_experiment(cfg, nullptr);
}

std::string format_metrics(const ExperimentConfig& cfg, const ExperimentOutcome& out) {
    const RunResult& r = out.run;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (float v : r.x0.data) {
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
    }
    std::ostringstream os;
    os << "metric,value\n";
    os << "mode," << run_mode_name(cfg.run.mode) << "\n";
    os << "devices," << cfg.run.n_devices << "\n";
    os << "steps," << cfg.run.num_steps << "\n";
    os << "warmup," << cfg.run.warmup << "\n";
    os << "gn_scheme," << gn_scheme_name(cfg.run.gn_scheme) << "\n";
    if (out.has_psnr) {
        os << "psnr_db," << fmt(out.psnr_db) << "\n";
        os << "psnr_peak," << fmt(out.psnr_peak) << "\n";
    }
    os << "output_min," << fmt(lo) << "\n";
    os << "output_max," << fmt(hi) << "\n";
    os << "total_macs," << r.total_macs << "\n";
    os << "per_device_macs," << out.per_device_macs << "\n";
    os << "comm_bytes_allgather," << r.volumes.allgather_recv << "\n";
    os << "comm_bytes_halo," << r.volumes.halo_recv << "\n";
    os << "comm_bytes_statreduce," << r.volumes.statreduce_recv << "\n";
    os << "comm_bytes_total," << r.volumes.total_recv() << "\n";
    os << "stall_us," << fmt(out.sim.total_stall_us) << "\n";
    os << "makespan_us," << fmt(out.sim.makespan_us) << "\n";
    os << "similarity_mean_abs_diff," << fmt(r.similarity.mean_abs_diff) << "\n";
    os << "similarity_range," << fmt(r.similarity.range()) << "\n";
    os << "similarity_ratio," << fmt(r.similarity.ratio()) << "\n";
    os << "pp_volume_estimate," << out.pp_estimate << "\n";
    os << "tp_volume_estimate," << out.tp_estimate << "\n";
    return os.str();
}

void write_artifacts(const ExperimentConfig& cfg, const ExperimentOutcome& out) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    auto wants = [&](const char* what) {
        for (const auto& e : cfg.emit)
            if (e == what) return true;
        return false;
    };
    const std::string dir = cfg.out_dir + "/";
    if (wants("tensor")) {
        write_tnsr(out.run.x0, dir + "x0.tnsr");
        // Trajectory stacked on the batch axis so similarity metrics can be
        // recomputed from files alone.
        if (!out.run.trajectory.empty()) {
            const Tensor& first = out.run.trajectory.front().x;
            Tensor traj(int(out.run.trajectory.size()) * first.n, first.c, first.h, first.w);
            std::size_t offset = 0;
            for (const LatentState& s : out.run.trajectory) {
                std::memcpy(traj.data.data() + offset, s.x.data.data(),
                            s.x.size() * sizeof(float));
                offset += s.x.size();
            }
            write_tnsr(traj, dir + "trajectory.tnsr");
        }
    }
    if (wants("image")) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (float v : out.run.x0.data) {
            lo = std::min(lo, double(v));
            hi = std::max(hi, double(v));
        }
        write_pgm(out.run.x0, dir + "x0.pgm", lo, hi);
    }
    if (wants("trace")) {
        std::ofstream os(dir + "trace.txt", std::ios::binary);
        os << format_trace(out.sim);
    }
    if (wants("metrics")) {
        std::ofstream os(dir + "metrics.csv", std::ios::binary);
        os << format_metrics(cfg, out);
    }
}

// ---- matrix ---------------------------------------------------------------------

std::string run_matrix(const std::vector<ExperimentConfig>& configs) {
    std::ostringstream os;
    os << "mode,N,steps,warmup,psnr_db_vs_reference,total_macs,per_device_macs,comm_bytes,"
          "stall_us,makespan_us,similarity_ratio\n";

    // Reference outputs cached per (size, steps, seeds, model) so every row
    // compares against the matching baseline.
    std::map<std::string, Tensor> references;
    auto reference_for = [&](const RunConfig& rc) -> const Tensor& {
        std::ostringstream key;
        key << rc.h << "x" << rc.w << "/" << rc.num_steps << "/" << rc.model_seed << "/"
            << rc.noise_seed << "/" << rc.cond_seed << "/" << rc.model.base_channels << "/"
            << rc.model.levels << "/" << rc.model.in_channels;
        auto it = references.find(key.str());
        if (it == references.end()) {
            RunConfig ref = rc;
            ref.mode = RunMode::Reference;
            ref.n_devices = 1;
            it = references.emplace(key.str(), run_sampling(ref).x0).first;
        }
        return it->second;
    };

    for (const ExperimentConfig& cfg : configs) {
        ExperimentOutcome out;
        if (cfg.run.mode == RunMode::Reference) {
            out = execute_experiment(cfg, nullptr);
            out.psnr_db = std::numeric_limits<double>::infinity();  // vs itself
            out.has_psnr = true;
        } else {
            const Tensor& ref = reference_for(cfg.run);
            out = execute_experiment(cfg, &ref);
        }
        os << run_mode_name(cfg.run.mode) << "," << cfg.run.n_devices << ","
           << cfg.run.num_steps << "," << cfg.run.warmup << "," << fmt(out.psnr_db) << ","
           << out.run.total_macs << "," << out.per_device_macs << ","
           << out.run.volumes.total_recv() << "," << fmt(out.sim.total_stall_us) << ","
           << fmt(out.sim.makespan_us) << "," << fmt(out.run.similarity.ratio()) << "\n";
    }
    return os.str();
}

}  // namespace patchsim
