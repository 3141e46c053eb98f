#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace psteer::audit {

// Test-mode observation hooks. Disabled by default; when enabled, dataset
// loaders and feature readers report file opens and ground-truth parses so
// tests can assert what an adaptation run actually consumed. Events carry
// the phase label active at the time they were recorded.

void enable(bool on);
bool enabled();
void reset();

// Phase label attached to subsequent events ("" when unset).
void set_phase(const std::string& phase);

void record_file_open(const std::string& path);
void record_truth_parse(const std::string& path);

struct Event {
    std::string phase;
    std::string path;
};

std::vector<Event> file_opens();
std::vector<Event> truth_parses();
std::size_t truth_parse_count(const std::string& phase);

} // namespace psteer::audit
