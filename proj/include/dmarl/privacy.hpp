#pragma once

#include <dmarl/consensus.hpp>

#include <string>
#include <vector>

namespace dmarl {

/// Audit record for the decentralization contract: while agent i's update
/// is executing (the reader scope), every read of policy or critic
/// parameters must target agent i's own blocks, and the only cross-agent
/// traffic allowed is consensus x-values moving along graph edges.
///
/// Training loops call note_param_read at each point where they hand an
/// agent's parameter block to a computation, and note_transfer from the
/// consensus gather. A null audit pointer disables all accounting.
struct PrivacyAudit {
    const Graph* graph = nullptr; // set to check transfers against edges
    int current_reader = -1;      // -1: unscoped (setup, logging, oracles)

    long long param_reads = 0;
    long long cross_agent_param_reads = 0;
    long long edge_transfers = 0;
    long long off_edge_transfers = 0;
    std::vector<std::string> violations;

    void note_param_read(int owner) {
        ++param_reads;
        if (current_reader >= 0 && owner != current_reader) {
            ++cross_agent_param_reads;
            if (violations.size() < 32)
                violations.push_back("agent " + std::to_string(current_reader) +
                                     " read parameters of agent " + std::to_string(owner));
        }
    }

    void note_transfer(int reader, int source, long long timestep) {
        ++edge_transfers;
        if (graph && !graph->has_edge(reader, source)) {
            ++off_edge_transfers;
            if (violations.size() < 32)
                violations.push_back("x-value of timestep " + std::to_string(timestep) +
                                     " moved from agent " + std::to_string(source) +
                                     " to non-neighbor " + std::to_string(reader));
        }
    }

    bool clean() const { return cross_agent_param_reads == 0 && off_edge_transfers == 0; }
};

/// RAII reader scope; nesting restores the outer reader on exit.
class AuditScope {
  public:
    AuditScope(PrivacyAudit* audit, int reader) : audit_(audit) {
        if (audit_) {
            previous_ = audit_->current_reader;
            audit_->current_reader = reader;
        }
    }
    ~AuditScope() {
        if (audit_)
            audit_->current_reader = previous_;
    }
    AuditScope(const AuditScope&) = delete;
    AuditScope& operator=(const AuditScope&) = delete;

  private:
    PrivacyAudit* audit_;
    int previous_ = -1;
};

inline void note_param_read(PrivacyAudit* audit, int owner) {
    if (audit)
        audit->note_param_read(owner);
}

} // namespace dmarl
