#pragma once

#include <array>
#include <cmath>

namespace dsplats {

template <class T>
struct Vec3 {
    T x = 0, y = 0, z = 0;

    constexpr Vec3() = default;
    constexpr Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

    template <class U>
    constexpr explicit Vec3(const Vec3<U>& v)
        : x(static_cast<T>(v.x)), y(static_cast<T>(v.y)), z(static_cast<T>(v.z)) {}

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
    constexpr Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
    constexpr Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    Vec3& operator-=(const Vec3& o) {
        x -= o.x;
        y -= o.y;
        z -= o.z;
        return *this;
    }
    Vec3& operator*=(T s) {
        x *= s;
        y *= s;
        z *= s;
        return *this;
    }

    T operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

template <class T>
constexpr Vec3<T> operator*(T s, const Vec3<T>& v) {
    return v * s;
}

template <class T>
constexpr T dot(const Vec3<T>& a, const Vec3<T>& b) {
    return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class T>
constexpr Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <class T>
T norm(const Vec3<T>& v) {
    return std::sqrt(dot(v, v));
}

template <class T>
Vec3<T> normalized(const Vec3<T>& v) {
    return v / norm(v);
}

using Vec3f = Vec3<float>;
using Vec3d = Vec3<double>;

// Row-major 3x3 matrix.
template <class T>
struct Mat3 {
    std::array<T, 9> m{};  // m[3*r + c]

    static constexpr Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }

    static Mat3 from_columns(const Vec3<T>& c0, const Vec3<T>& c1, const Vec3<T>& c2) {
        Mat3 r;
        r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return r;
    }

    T operator()(int r, int c) const { return m[3 * r + c]; }
    T& operator()(int r, int c) { return m[3 * r + c]; }

    Vec3<T> col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    Vec3<T> row(int r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    Vec3<T> operator*(const Vec3<T>& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
        return r;
    }

    Mat3 operator*(T s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
        return r;
    }

    T det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

using Mat3f = Mat3<float>;
using Mat3d = Mat3<double>;

// Quaternion stored (w, x, y, z).
template <class T>
struct Quat {
    T w = 1, x = 0, y = 0, z = 0;

    constexpr Quat() = default;
    constexpr Quat(T w_, T x_, T y_, T z_) : w(w_), x(x_), y(y_), z(z_) {}

    template <class U>
    constexpr explicit Quat(const Quat<U>& q)
        : w(static_cast<T>(q.w)), x(static_cast<T>(q.x)), y(static_cast<T>(q.y)),
          z(static_cast<T>(q.z)) {}

    T norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    T operator[](int i) const { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
    T& operator[](int i) { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
};

using Quatf = Quat<float>;
using Quatd = Quat<double>;

// Degenerate zero quaternion normalizes to identity.
template <class T>
Quat<T> quat_normalized(const Quat<T>& q, T eps = static_cast<T>(1e-12)) {
    T n = q.norm();
    if (n < eps) return Quat<T>(1, 0, 0, 0);
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

// Rotation matrix of a unit quaternion.
template <class T>
Mat3<T> quat_to_matrix(const Quat<T>& q) {
    const T w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3<T> r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    return r;
}

template <class T>
Quat<T> quat_multiply(const Quat<T>& a, const Quat<T>& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

template <class T>
Quat<T> quat_from_axis_angle(const Vec3<T>& axis_unit, T angle_rad) {
    T h = angle_rad / 2;
    T s = std::sin(h);
    return {std::cos(h), axis_unit.x * s, axis_unit.y * s, axis_unit.z * s};
}

// Quaternion of a rotation matrix (Shepperd's method); returns w >= 0.
template <class T>
Quat<T> matrix_to_quat(const Mat3<T>& r) {
    T tr = r(0, 0) + r(1, 1) + r(2, 2);
    Quat<T> q;
    if (tr > 0) {
        T s = std::sqrt(tr + 1) * 2;
        q = {s / 4, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        T s = std::sqrt(1 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
        q = {(r(2, 1) - r(1, 2)) / s, s / 4, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
    } else if (r(1, 1) > r(2, 2)) {
        T s = std::sqrt(1 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
        q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, s / 4, (r(1, 2) + r(2, 1)) / s};
    } else {
        T s = std::sqrt(1 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
        q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, s / 4};
    }
    if (q.w < 0) {
        q.w = -q.w;
        q.x = -q.x;
        q.y = -q.y;
        q.z = -q.z;
    }
    return quat_normalized(q);
}

constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

}  // namespace dsplats
