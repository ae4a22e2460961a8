#include "doctest.h"

#include <cmath>
#include <numbers>
#include <set>

#include "bdiff/config.hpp"
#include "bdiff/data_io.hpp"
#include "bdiff/hierarchy.hpp"

using namespace bdiff;

namespace {

BranchHierarchy fixture(const std::string& name) { return load_hierarchy(std::string(BDIFF_FIXTURES) + "/" + name); }

struct Row {
    double start, end;
    std::set<std::string> classes;
    auto operator<=>(const Row&) const = default;
};

std::set<Row> rows(const BranchHierarchy& h) {
    std::set<Row> out;
    for (const auto& b : h.branches()) {
        auto names = h.class_names(b);
        out.insert({b.start, b.end, {names.begin(), names.end()}});
    }
    return out;
}

TabularDataset one_dim(const std::vector<std::pair<std::string, std::pair<double, double>>>& classes, std::size_t n,
                       std::uint64_t seed) {
    MixtureSpec s;
    for (const auto& [name, ms] : classes) s.classes.push_back({name, {ms.first}, {ms.second * ms.second}});
    return synth_gaussian_mixture(s, n, seed).data;
}

// Brute-force branch-score distance: every nonempty class subset is a
// candidate cluster; its length in a tree is the summed length of branches
// whose class set equals it.
double brute_branch_score(const BranchHierarchy& a, const BranchHierarchy& b) {
    const auto& cls = a.classes();
    const std::size_t n = cls.size();
    auto length_of = [&](const BranchHierarchy& h, const std::set<std::string>& sub) {
        double len = 0.0;
        for (const auto& br : h.branches()) {
            const auto names = h.class_names(br);
            if (std::set<std::string>(names.begin(), names.end()) == sub) len += br.end - br.start;
        }
        return len;
    };
    double sum = 0.0;
    for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
        std::set<std::string> sub;
        for (std::size_t k = 0; k < n; ++k)
            if (mask >> k & 1) sub.insert(cls[k]);
        const double d = length_of(a, sub) - length_of(b, sub);
        sum += d * d;
    }
    return std::sqrt(sum);
}

}  // namespace

TEST_CASE("noisy distance curves") {
    NoiseProcess proc;
    const auto grid = uniform_grid(1.0, 1000);
    CHECK(grid.front() == doctest::Approx(0.001));
    CHECK(grid.back() == 1.0);

    SUBCASE("indistinguishable classes") {
        auto d = one_dim({{"p", {1.0, 0.0}}, {"q", {1.0, 0.0}}}, 200, 1);
        Rng rng(2);
        auto c = pairwise_noisy_distances(d, 200, proc, grid, rng);
        for (std::size_t g = 0; g < grid.size(); g += 50) {
            const double self = 0.5 * (c.curve(0, 0)[g] + c.curve(1, 1)[g]);
            CHECK(c.curve(0, 1)[g] == doctest::Approx(self).epsilon(0.15));
        }
    }
    SUBCASE("separated unit-variance classes near t = 0") {
        auto d = one_dim({{"p", {0.0, 1.0}}, {"q", {10.0, 1.0}}}, 4000, 3);
        Rng rng(4);
        auto c = pairwise_noisy_distances(d, 4000, proc, grid, rng);
        // |X - Y| for independent N(0,1): X - Y ~ N(0, 2), so E = sqrt(2) sqrt(2/pi)
        Rng mc(5);
        double self = 0.0, cross = 0.0;
        const int n = 200000;
        for (int i = 0; i < n; ++i) {
            self += std::abs(mc.normal() - mc.normal());
            cross += std::abs(10.0 + mc.normal() - mc.normal());
        }
        self /= n;
        cross /= n;
        CHECK(self == doctest::Approx(2.0 / std::sqrt(std::numbers::pi)).epsilon(0.01));
        CHECK(c.curve(0, 0)[0] == doctest::Approx(self).epsilon(0.05));
        CHECK(c.curve(1, 1)[0] == doctest::Approx(self).epsilon(0.05));
        CHECK(c.curve(0, 1)[0] == doctest::Approx(cross).epsilon(0.02));
    }
    SUBCASE("seeded reproducibility and errors") {
        auto d = one_dim({{"p", {0.0, 1.0}}, {"q", {2.0, 1.0}}}, 50, 6);
        Rng a(7), b(7);
        CHECK(pairwise_noisy_distances(d, 30, proc, grid, a).curves ==
              pairwise_noisy_distances(d, 30, proc, grid, b).curves);
        auto tiny = one_dim({{"p", {0.0, 1.0}}, {"q", {2.0, 1.0}}}, 1, 6);
        CHECK_THROWS_AS(pairwise_noisy_distances(tiny, 30, proc, grid, a), DataError);
        CHECK_THROWS_AS(pairwise_noisy_distances(d, 0, proc, grid, a), DomainError);
    }
}

TEST_CASE("curve smoothing") {
    std::vector<double> flat(1000, 2.5);
    for (double v : smooth_curve(flat)) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));

    std::vector<double> impulse(1000, 0.0);
    impulse[500] = 1.0;
    const auto s = smooth_curve(impulse);
    double mass = 0.0;
    for (double v : s) mass += v;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::max_element(s.begin(), s.end()) - s.begin() == 500);
    for (int k = 1; k <= 12; ++k) {
        CHECK(s[500 + k] == doctest::Approx(s[500 - k]).epsilon(1e-12));
        CHECK(s[500 + k] == doctest::Approx(s[500] * std::exp(-0.5 * k * k / 9.0)).epsilon(1e-9));
    }
    CHECK(s[513] == 0.0);
    CHECK(s[487] == 0.0);

    std::vector<double> ramp(1000);
    for (int i = 0; i < 1000; ++i) ramp[i] = 0.01 * i - 3.0;
    const auto r = smooth_curve(ramp);
    for (int i = 12; i < 988; ++i) CHECK(r[i] == doctest::Approx(ramp[i]).epsilon(1e-6));
}

TEST_CASE("merge times") {
    NoiseProcess proc;
    const auto grid = uniform_grid(1.0, 1000);
    SUBCASE("identical classes merge at the first grid point") {
        DistanceCurves c;
        c.grid = grid;
        c.num_classes = 2;
        c.curves.assign(3, std::vector<double>(grid.size(), 1.0));
        CHECK(merge_times(c, 0.0, 1.0)(0, 1) == grid.front());
    }
    SUBCASE("near pairs merge before far pairs; infinite tolerance is vacuous") {
        auto d = one_dim({{"o", {0.0, 1.0}}, {"near", {0.1, 1.0}}, {"far", {10.0, 1.0}}}, 500, 8);
        Rng rng(9);
        auto c = smooth_curves(pairwise_noisy_distances(d, 500, proc, grid, rng));
        auto tau = merge_times(c, 0.005, 1.0);
        CHECK(tau(0, 1) < tau(0, 2));
        CHECK(tau(0, 2) == 1.0);
        auto inf = merge_times(c, std::numeric_limits<double>::infinity(), 1.0);
        CHECK(inf(0, 1) == grid.front());
        CHECK(inf(0, 2) == grid.front());
        CHECK(inf(1, 2) == grid.front());
    }
    SUBCASE("merge time is nondecreasing in the class gap") {
        double last = 0.0;
        for (double gap : {0.05, 0.3, 0.8}) {
            auto d = one_dim({{"o", {0.0, 0.3}}, {"x", {gap, 0.3}}}, 500, 10);
            Rng rng(11);
            auto tau = merge_times(smooth_curves(pairwise_noisy_distances(d, 500, proc, grid, rng)), 0.005, 1.0);
            CHECK(tau(0, 1) >= last);
            last = tau(0, 1);
        }
    }
}

TEST_CASE("greedy construction") {
    SUBCASE("single class") {
        auto h = build_hierarchy(MergeTimes(1), {"x"}, 1.0);
        REQUIRE(h.size() == 1);
        CHECK(h.branches()[0] == Branch{0.0, 1.0, {0}, 0});
        CHECK(validate(h).empty());
    }
    SUBCASE("reproduces the 0-4-9 digit tree") {
        MergeTimes tau(3);  // classes 0, 4, 9
        tau.set(1, 2, 0.35);
        tau.set(0, 1, 0.5);
        tau.set(0, 2, 0.5);
        auto h = build_hierarchy(tau, {"0", "4", "9"}, 1.0);
        CHECK(rows(h) == rows(fixture("digits_049.json")));
        CHECK(rows(h) == std::set<Row>{{0.5, 1, {"0", "4", "9"}},
                                       {0, 0.5, {"0"}},
                                       {0.35, 0.5, {"4", "9"}},
                                       {0, 0.35, {"4"}},
                                       {0, 0.35, {"9"}}});
        CHECK(validate(h).empty());
    }
    SUBCASE("2|C| - 1 branches for 1..26 classes") {
        Rng rng(12);
        for (std::size_t n = 1; n <= 26; ++n) {
            std::vector<std::string> cls;
            for (std::size_t k = 0; k < n; ++k) cls.push_back(std::string(1, static_cast<char>('A' + k)));
            MergeTimes tau(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) tau.set(i, j, std::round(rng.uniform() * 20) / 20);
            auto h = build_hierarchy(tau, cls, 1.0);
            CHECK(h.size() == 2 * n - 1);
            CHECK(validate(h).empty());
        }
    }
    SUBCASE("duplicate classes rejected") {
        CHECK_THROWS_AS(build_hierarchy(MergeTimes(2), {"x", "x"}, 1.0), DataError);
    }
}

TEST_CASE("tables as fixtures") {
    const std::map<std::string, std::size_t> expected = {
        {"digits.json", 10},   {"digits_discrete.json", 10}, {"digits_049.json", 3},
        {"digits_0479.json", 4}, {"letters.json", 26},         {"cells.json", 9},
        {"cells_nk_mono.json", 2}, {"cells_nk_mono_memb.json", 3}};
    for (const auto& [name, n] : expected) {
        CAPTURE(name);
        auto h = fixture(name);
        CHECK(h.classes().size() == n);
        CHECK(h.size() == 2 * n - 1);
        CHECK(validate(h).empty());
        // lookup agrees with a brute-force scan, and t = T goes to the root
        const auto& br = h.branches();
        for (std::size_t c = 0; c < n; ++c) {
            for (int k = 0; k < 1000; ++k) {
                const double t = h.horizon() * k / 1000.0;
                std::size_t hits = 0, found = 0;
                for (std::size_t i = 0; i < br.size(); ++i)
                    if (br[i].contains(c) && br[i].start <= t && t < br[i].end) {
                        ++hits;
                        found = i;
                    }
                REQUIRE(hits == 1);
                CHECK(h.lookup_index(c, t) == found);
            }
            CHECK(h.lookup_index(c, h.horizon()) == h.root());
        }
        CHECK(hierarchy_from_json(to_json(h)) == h);
    }
    CHECK(fixture("letters.json").size() == 51);
}

TEST_CASE("branch lookup on the 0-4-9 tree") {
    auto h = fixture("digits_049.json");
    auto branch = [&](const std::string& c, double t) {
        const auto& b = h.lookup(h.class_index(c), t);
        auto n = h.class_names(b);
        return Row{b.start, b.end, {n.begin(), n.end()}};
    };
    CHECK(branch("4", 0.40) == Row{0.35, 0.5, {"4", "9"}});
    CHECK(branch("0", 0.2) == Row{0, 0.5, {"0"}});
    CHECK(branch("9", 1.0) == Row{0.5, 1, {"0", "4", "9"}});
    CHECK(branch_lookup(h, "9", 1.0) == h.branches()[h.root()].task);
    CHECK_THROWS_AS(branch_lookup(h, "7", 0.5), LookupError);
    CHECK_THROWS_AS(branch_lookup(h, "4", 1.5), DomainError);
}

TEST_CASE("branch points") {
    CHECK(lca_branch_point(fixture("digits_049.json"), "4", "9") == 0.35);
    CHECK(lca_branch_point(fixture("cells_nk_mono.json"), "CD16+ NK", "Cl. Mono.") == 0.5796);
    CHECK(lca_branch_point(fixture("cells_nk_mono_memb.json"), "CD16+ NK", "Cl. Mono.") == 0.5796);
    CHECK(lca_branch_point(fixture("digits.json"), "4", "9") == 0.3524);
    CHECK_THROWS_AS(lca_branch_point(fixture("digits.json"), "4", "4"), DomainError);
}

TEST_CASE("validation names the broken cells") {
    auto h = fixture("digits_049.json");
    auto overlap = h;
    for (auto& b : overlap.mutable_branches())
        if (b.classes.size() == 1 && h.classes()[b.classes[0]] == "4") b.end = 0.4;
    auto v = validate(overlap);
    REQUIRE_FALSE(v.empty());
    bool named = false;
    for (const auto& s : v) named |= s.find("cell (4, 0.35) covered by 2 branches") != std::string::npos;
    CHECK(named);

    std::vector<Branch> kept;
    for (const auto& b : h.branches())
        if (!(b.classes.size() == 1 && h.classes()[b.classes[0]] == "0")) kept.push_back(b);
    BranchHierarchy missing(h.classes(), 1.0, kept);
    v = validate(missing);
    named = false;
    for (const auto& s : v) named |= s.find("cell (0, 0) covered by 0 branches") != std::string::npos;
    CHECK(named);
}

TEST_CASE("attaching a class") {
    auto h = fixture("digits_049.json");
    auto r = attach_class(h, "7", "4", 0.38);
    CHECK(rows(r.hierarchy) == rows(fixture("digits_0479.json")));
    CHECK(r.hierarchy.size() == h.size() + 2);
    CHECK(validate(r.hierarchy).empty());
    CHECK(r.new_task == h.task_count());
    CHECK(r.hierarchy.task_count() == h.task_count() + 1);
    // old classes keep their task at every time below the original branch points
    for (const auto& c : h.classes())
        for (int k = 0; k < 1000; ++k) {
            const double t = k / 1000.0;
            CHECK(r.task_map[branch_lookup(h, c, t)] == branch_lookup(r.hierarchy, c, t));
        }

    BranchHierarchy single({"x"}, 1.0, {{0.0, 1.0, {0}, 0}});
    auto s = attach_class(single, "y", "x", 0.5);
    CHECK(s.hierarchy.size() == 3);
    CHECK(validate(s.hierarchy).empty());

    CHECK_THROWS_AS(attach_class(h, "7", "5", 0.3), LookupError);
    CHECK_THROWS_AS(attach_class(h, "7", "4", 1.0), DomainError);
    CHECK_THROWS_AS(attach_class(h, "4", "9", 0.3), DataError);
}

TEST_CASE("random hierarchies") {
    Rng rng(13);
    auto one = random_hierarchy({"x"}, 1.0, rng);
    REQUIRE(one.size() == 1);
    CHECK(one.branches()[0] == Branch{0.0, 1.0, {0}, 0});
    std::vector<std::string> ten;
    for (int k = 0; k < 10; ++k) ten.push_back("c" + std::to_string(k));
    for (int rep = 0; rep < 20; ++rep) {
        auto h = random_hierarchy(ten, 1.0, rng);
        CHECK(h.size() == 19);
        CHECK(validate(h).empty());
        for (const auto& child : h.branches())
            for (const auto& parent : h.branches())
                if (parent.start == child.end && parent.classes.size() > child.classes.size() && child.classes.size() > 1)
                    CHECK(child.start < parent.start);
    }
}

TEST_CASE("branch-score distance") {
    auto two = [](double merge) {
        MergeTimes t(2);
        t.set(0, 1, merge);
        return build_hierarchy(t, {"p", "q"}, 1.0);
    };
    auto a = two(0.3), b = two(0.5);
    CHECK(branch_score_distance(a, a) == 0.0);
    CHECK(branch_score_distance(a, b) == doctest::Approx(brute_branch_score(a, b)).epsilon(1e-12));
    CHECK(branch_score_distance(a, b) == doctest::Approx(std::sqrt(3 * 0.04)).epsilon(1e-12));
    CHECK(branch_score_distance(a, b) == branch_score_distance(b, a));

    Rng rng(14);
    const std::vector<std::string> five = {"a", "b", "c", "d", "e"};
    for (int rep = 0; rep < 20; ++rep) {
        auto x = random_hierarchy(five, 1.0, rng);
        auto y = random_hierarchy(five, 1.0, rng);
        CHECK(branch_score_distance(x, y) == doctest::Approx(brute_branch_score(x, y)).epsilon(1e-12));
        CHECK(branch_score_distance(x, y) == doctest::Approx(branch_score_distance(y, x)).epsilon(1e-12));
        CHECK(branch_score_distance(x, x) == 0.0);
    }
    CHECK_THROWS_AS(branch_score_distance(a, fixture("digits_049.json")), DomainError);
}

TEST_CASE("discovery on synthetic mixtures yields valid trees") {
    NoiseProcess proc;
    for (std::size_t n = 1; n <= 5; ++n) {
        MixtureSpec s;
        for (std::size_t k = 0; k < n; ++k)
            s.classes.push_back({"k" + std::to_string(k), {static_cast<double>(k), 0.5 * k}, {0.1, 0, 0, 0.1}});
        auto data = synth_gaussian_mixture(s, 100, 15).data;
        Rng rng(16);
        DiscoveryConfig cfg;
        cfg.n = 100;
        auto r = discover(data, proc, cfg, rng);
        CHECK(r.hierarchy.size() == 2 * n - 1);
        CHECK(validate(r.hierarchy).empty());
    }
}

TEST_CASE("branch table rows") {
    auto h = fixture("digits_049.json");
    const auto table = branch_table(h);
    CHECK(std::count(table.begin(), table.end(), '\n') == 6);
    CHECK(table.find("0.35\t0.5\t4,9\n") != std::string::npos);
}
