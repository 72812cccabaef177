#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cnrf {

// Buffers viewed through Eigen maps. A fixed base alignment keeps the
// vectorised kernels' summation order, and so the results, independent of
// where the allocator happens to place the data.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Rgb = std::array<double, 3>;

// ---------------------------------------------------------------------------
// Error classes. Everything in the library reports failure by throwing one of
// these; the CLI maps them onto exit codes.

class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class FormatErrorKind { BadMagic, DimensionOverflow, Truncated, Corrupt };

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, std::string field, const std::string& what)
        : std::runtime_error(what + " (field: " + field + ")"), kind_(kind), field_(std::move(field))
    {
    }
    FormatErrorKind kind() const { return kind_; }
    const std::string& field() const { return field_; }

private:
    FormatErrorKind kind_;
    std::string field_;
};

/// Raised when two volumes trained against different renderers are combined.
class IncompatibleScenes : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvariantViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------

struct Aabb {
    Vec3 min = Vec3::Constant(-1.0);
    Vec3 max = Vec3::Constant(1.0);

    Vec3 extent() const { return max - min; }
    Vec3 center() const { return 0.5 * (min + max); }
    bool valid() const
    {
        return min.allFinite() && max.allFinite() && (min.array() < max.array()).all();
    }
    bool contains(const Vec3& p, double tol = 0.0) const
    {
        return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
    }
    bool intersects(const Aabb& o) const
    {
        return (min.array() <= o.max.array()).all() && (o.min.array() <= max.array()).all();
    }
    bool operator==(const Aabb& o) const { return min == o.min && max == o.max; }
};

inline uint64_t splitmix64(uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded generator. Streams derived with `derive` are independent of the
/// order in which work items are scheduled.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(splitmix64(seed)) {}

    static Rng derive(uint64_t seed, uint64_t stream)
    {
        return Rng(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
    }

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return std::uniform_int_distribution<uint64_t>(0, n - 1)(engine_); }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

    std::mt19937_64& engine() { return engine_; }
    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 engine_;
};

/// FNV-1a over a byte range.
uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(uint64_t v);
uint64_t parse_hex64(const std::string& s);

/// Keeps the first exception thrown inside a parallel region so it can be
/// rethrown on the calling thread once the region has joined.
class ExceptionSlot {
public:
    template <typename F>
    void run(F&& f) noexcept
    {
        try {
            f();
        } catch (...) {
            std::lock_guard<std::mutex> lock(mutex_);
            if (!error_) error_ = std::current_exception();
        }
    }
    void rethrow() const
    {
        if (error_) std::rethrow_exception(error_);
    }

private:
    std::mutex mutex_;
    std::exception_ptr error_;
};

}  // namespace cnrf
