#include "cnrf/common.hpp"

#include <cstdio>
#include <sstream>

namespace cnrf {

std::string Rng::state() const
{
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s)
{
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw InvalidArgument("malformed rng state");
}

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed)
{
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t parse_hex64(const std::string& s)
{
    size_t used = 0;
    uint64_t v = 0;
    try {
        v = std::stoull(s, &used, 16);
    } catch (const std::exception&) {
        throw InvalidArgument("not a hex hash: " + s);
    }
    if (used != s.size()) throw InvalidArgument("not a hex hash: " + s);
    return v;
}

}  // namespace cnrf
