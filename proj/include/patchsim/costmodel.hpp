#pragma once

#include "patchsim/model.hpp"
#include "patchsim/trace.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace patchsim {

// Discrete analytic latency model over the runtime's raw trace. Simulated time
// is in microseconds; nothing here touches wall clocks.

struct CostParams {
    double compute_rate = 1000.0;            // MACs per us
    double link_bandwidth = 100.0;            // bytes per us
    double link_latency = 5.0;                // us per message
    double comm_uses_compute_fraction = 0.15; // compute slowdown while a transfer is in flight

    void validate() const;  // throws std::invalid_argument
};

enum class TimelineKind : uint8_t { Compute, CommPost, CommComplete, Stall };

const char* timeline_kind_name(TimelineKind k);

struct TimelineEvent {
    int device = 0;
    TimelineKind kind = TimelineKind::Compute;
    int layer = -1;
    int step = 0;
    double start = 0.0;  // us
    double end = 0.0;    // us
    uint64_t bytes = 0;
    uint64_t macs = 0;
};

struct SimResult {
    std::vector<TimelineEvent> events;  // ordered by (device, time)
    std::vector<double> device_end;     // per-device completion (compute+stall)
    double makespan_us = 0.0;
    double total_stall_us = 0.0;
};

// MAC count of one layer restricted to `region` (given at the layer's input
// resolution). Conv: out_elems*c_in*k^2; linear: tokens*in*out; attention:
// 2*m*s*d (m fresh query tokens, s full token count). Other kinds count zero.
uint64_t macs_of_layer(const LayerDescriptor& d, const Region& region);

// Full-graph totals for an h x w input (batch 1).
uint64_t model_total_macs(const Model& m, int h, int w);

SimResult simulate_timeline(const RawTrace& trace, const CostParams& params);

// Measured byte totals by primitive, straight off the trace.
CommVolumes comm_volume_report(const RawTrace& trace);

// Analytic per-device, per-step estimates used only for PP-vs-TP ratio
// reporting. TP: one full-activation ring AllReduce (2(N-1)/N of the output
// activation) per conv/linear/attention layer. PP: conv layers exchange halo
// rows only, self-attention AllGathers its input ((N-1)/N), cross-attention
// and linear layers communicate nothing.
uint64_t tp_volume_estimate(const Model& m, int h, int w, int n_devices);
uint64_t pp_volume_estimate(const Model& m, int h, int w, int n_devices);

// Line-delimited trace records: one event per line,
// "device kind layer step start end bytes macs".
std::string format_trace(const SimResult& sim);

}  // namespace patchsim
