// common.hpp - shared small types, errors and parallel helpers.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kv2ct {

// Patient axes. x = R-L, y = A-P, z = S-I, matching Volume3D storage order.
enum class Axis : int { RL = 0, AP = 1, SI = 2 };

inline std::string axis_name(Axis a) {
    switch (a) {
        case Axis::RL: return "R-L";
        case Axis::AP: return "A-P";
        case Axis::SI: return "S-I";
    }
    return "?";
}

// Throwing parse helper for CLI/config use.
Axis axis_from_string(const std::string& s);

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return {x / n, y / n, z / n};
    }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

// Inclusive index box [lo, hi] per axis.
struct BoxIndices {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{-1, -1, -1};

    bool empty() const {
        return hi[0] < lo[0] || hi[1] < lo[1] || hi[2] < lo[2];
    }
    int extent(int a) const { return hi[a] - lo[a] + 1; }
    bool contains(const BoxIndices& inner) const {
        for (int a = 0; a < 3; ++a)
            if (inner.lo[a] < lo[a] || inner.hi[a] > hi[a]) return false;
        return true;
    }
    bool operator==(const BoxIndices& o) const { return lo == o.lo && hi == o.hi; }
};

// Worker cap: KV2CT_THREADS env var, else hardware concurrency.
int worker_count();

// Static-partition parallel loop over [0, n). Each index is computed
// independently into preallocated output, so results do not depend on the
// thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace kv2ct
