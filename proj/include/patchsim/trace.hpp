#pragma once

#include <cstdint>
#include <vector>

namespace patchsim {

// Raw execution record produced by the patch runtime, consumed by the cost
// model. Events are per-device program order; no wall-clock in here, so the
// trace is identical for every thread interleaving.

enum class RawKind : uint8_t { Compute, Post, Wait };
enum class CommPrimitive : uint8_t { AllGather, Halo, StatReduce };

const char* raw_kind_name(RawKind k);
const char* comm_primitive_name(CommPrimitive p);

struct RawEvent {
    int device = 0;
    int step = 0;
    int layer = -1;
    RawKind kind = RawKind::Compute;
    CommPrimitive prim = CommPrimitive::AllGather;
    uint64_t macs = 0;        // Compute
    uint64_t bytes_recv = 0;  // Post: bytes this device receives for the tag
    uint64_t bytes_sent = 0;  // Post: bytes this device sends for the tag
    uint64_t tag = 0;         // collective identity, shared across devices
};

struct RawTrace {
    int n_devices = 1;
    std::vector<std::vector<RawEvent>> per_device;

    explicit RawTrace(int n = 1) : n_devices(n), per_device(n) {}
};

struct CommVolumes {
    uint64_t allgather_recv = 0, allgather_sent = 0;
    uint64_t halo_recv = 0, halo_sent = 0;
    uint64_t statreduce_recv = 0, statreduce_sent = 0;

    uint64_t total_recv() const { return allgather_recv + halo_recv + statreduce_recv; }
    uint64_t total_sent() const { return allgather_sent + halo_sent + statreduce_sent; }

    void add(CommPrimitive prim, uint64_t recv, uint64_t sent) {
        switch (prim) {
            case CommPrimitive::AllGather: allgather_recv += recv; allgather_sent += sent; break;
            case CommPrimitive::Halo: halo_recv += recv; halo_sent += sent; break;
            case CommPrimitive::StatReduce: statreduce_recv += recv; statreduce_sent += sent; break;
        }
    }
};

// Tags are never zero (zero is the hub's "not waiting" sentinel).
inline uint64_t make_tag(int step, int layer, CommPrimitive prim) {
    return (uint64_t(uint32_t(step + 1)) << 24) | (uint64_t(uint32_t(layer + 1)) << 4) |
           uint64_t(uint8_t(prim));
}

}  // namespace patchsim
