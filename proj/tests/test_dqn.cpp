#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "support/chain_mdp.hpp"
#include "vitdrive/dqn.hpp"

using namespace vitdrive;

TEST_CASE("select_action follows epsilon-greedy semantics") {
    Rng rng(5);

    SECTION("pure greedy picks the max") {
        auto q = Tensor::from_data({1, 2}, {1.0f, 3.0f});
        CHECK(select_action(q, 0.0, rng) == 1);
    }

    SECTION("greedy ties break to the lowest index") {
        auto q = Tensor::from_data({1, 2}, {2.0f, 2.0f});
        CHECK(select_action(q, 0.0, rng) == 0);
    }

    SECTION("epsilon 1 is uniform within 3 sigma") {
        auto q = Tensor::from_data({1, 2}, {100.0f, -100.0f});
        int count1 = 0;
        const int n = 10000;
        for (int i = 0; i < n; ++i) count1 += select_action(q, 1.0, rng);
        // binomial(n, 1/2): sigma = sqrt(n)/2 = 50
        CHECK(std::abs(count1 - 5000) <= 150);
    }
}

TEST_CASE("replay buffer is a FIFO ring with uniform sampling") {
    ReplayBuffer<int> buf(8);
    auto tr = [](int v) {
        Transition<int> t;
        t.state = std::make_shared<const int>(v);
        t.next_state = std::make_shared<const int>(v + 1);
        t.action = 0;
        t.reward = static_cast<float>(v);
        return t;
    };

    SECTION("size is capped and overwrite order is FIFO") {
        for (int i = 0; i < 20; ++i) buf.push(tr(i));
        CHECK(buf.size() == 8);
        // slots hold the last 8 pushes: 12..19
        std::set<int> seen;
        for (size_t i = 0; i < buf.size(); ++i) seen.insert(*buf.at(i).state);
        CHECK(*seen.begin() == 12);
        CHECK(*seen.rbegin() == 19);
    }

    SECTION("sampling below batch size is rejected") {
        buf.push(tr(0));
        Rng rng(1);
        CHECK_THROWS_AS(buf.sample(2, rng), std::logic_error);
    }

    SECTION("per-slot selection frequencies are uniform") {
        for (int i = 0; i < 8; ++i) buf.push(tr(i));
        Rng rng(7);
        std::array<int, 8> counts{};
        const int draws = 80000;
        for (int i = 0; i < draws / 4; ++i)
            for (const auto* t : buf.sample(4, rng)) counts[static_cast<size_t>(*t->state)]++;
        // multinomial per-slot: mean 10000, sigma ~ sqrt(n p (1-p)) ~ 93.5
        for (int c : counts) CHECK(std::abs(c - 10000) < 4 * 94);
    }

    SECTION("non-finite reward is rejected") {
        auto bad = tr(0);
        bad.reward = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(buf.push(bad), std::invalid_argument);
    }
}

TEST_CASE("td_loss implements the Bellman target") {
    auto online = testsup::MlpQModel::init(5, 16, 3);
    auto target = online.clone();

    auto make = [](int s, int a, float r, int s2, bool term) {
        Transition<int> t;
        t.state = std::make_shared<const int>(s);
        t.action = a;
        t.reward = r;
        t.next_state = std::make_shared<const int>(s2);
        t.terminal = term;
        return t;
    };

    SECTION("terminal transition with r=-100 and zero Q gives loss 10000") {
        auto zero = testsup::MlpQModel::init(5, 16, 4);
        for (auto& v : zero.w2.values()) v = 0;
        auto zt = zero.clone();
        auto t = make(0, 0, -100.0f, 1, true);
        std::vector<const Transition<int>*> batch = {&t};
        auto loss = td_loss<float>(nullptr, zero, zt, batch, 0.95f);
        CHECK(loss.item() == Catch::Approx(10000.0).margin(1e-3));
    }

    SECTION("matched prediction gives zero loss") {
        // pin Q(s,a) = 2.9 for all s,a on online; max target Q = 2
        auto pinned = testsup::MlpQModel::init(5, 16, 5);
        for (auto& v : pinned.w1.values()) v = 0;
        for (auto& v : pinned.w2.values()) v = 0;
        pinned.b2.values()[0] = 2.9f;
        pinned.b2.values()[1] = 2.9f;
        auto tgt = pinned.clone();
        tgt.b2.values()[0] = 2.0f;
        tgt.b2.values()[1] = 1.0f;
        auto t = make(0, 1, 1.0f, 2, false);
        std::vector<const Transition<int>*> batch = {&t};
        auto loss = td_loss<float>(nullptr, pinned, tgt, batch, 0.95f);
        CHECK(loss.item() == Catch::Approx(0.0).margin(1e-10));
    }

    SECTION("gamma 0 reduces the target to the reward") {
        auto t1 = make(0, 0, 3.0f, 1, false);
        auto t2 = make(1, 1, -2.0f, 2, false);
        std::vector<const Transition<int>*> batch = {&t1, &t2};
        auto loss_g0 = td_loss<float>(nullptr, online, target, batch, 0.0f);
        double expected = 0;
        Rng unused(0);
        for (const auto* tr : batch) {
            auto q = online.q_forward(nullptr, *tr->state);
            const double d = q.values()[tr->action] - tr->reward;
            expected += d * d;
        }
        expected /= 2;
        CHECK(loss_g0.item() == Catch::Approx(expected).margin(1e-5));
    }

    SECTION("gradient flows only through the online network") {
        auto t = make(0, 0, 1.0f, 1, false);
        std::vector<const Transition<int>*> batch = {&t};
        Tape tape;
        auto loss = td_loss<float>(&tape, online, target, batch, 0.9f);
        tape.backward(loss);
        bool online_has = false;
        online.for_each_param([&](const std::string&, Tensor& p) {
            for (float g : p.grad_view()) online_has = online_has || g != 0.0f;
        });
        bool target_has = false;
        target.for_each_param([&](const std::string&, Tensor& p) {
            target_has = target_has || !p.grad_view().empty();
        });
        CHECK(online_has);
        CHECK_FALSE(target_has);
    }
}

TEST_CASE("sync_target copies on the period and freezes between") {
    auto online = testsup::MlpQModel::init(5, 8, 11);
    auto target = online.clone();

    SECTION("tau 1 keeps target equal to online") {
        for (auto& v : online.w1.values()) v += 0.5f;
        sync_target(online, target, 1, 1);
        CHECK(target.w1.values()[0] == online.w1.values()[0]);
    }

    SECTION("tau 500 over 1000 steps copies exactly twice") {
        int copies = 0;
        struct Probe {
            testsup::MlpQModel inner;
            int* copies;
            void copy_params_from(Probe& o) {
                inner.copy_params_from(o.inner);
                ++*copies;
            }
        };
        Probe po{online.clone(), &copies}, pt{online.clone(), &copies};
        for (int64_t step = 1; step <= 1000; ++step) sync_target(po, pt, step, 500);
        CHECK(copies == 2);
    }

    SECTION("target bytes unchanged between syncs") {
        sync_target(online, target, 1000, 1000);
        auto before = target.w1.clone();
        for (auto& v : online.w1.values()) v += 1.0f;
        for (int64_t s = 1001; s < 2000; ++s) sync_target(online, target, s, 1000);
        for (size_t i = 0; i < before.values().size(); ++i)
            CHECK(target.w1.values()[i] == before.values()[i]);
    }
}

TEST_CASE("adam optimizer behaves on canonical cases") {
    SECTION("zero gradients leave parameters unchanged") {
        auto w = Tensor::from_data({2}, {1.0f, -2.0f}).set_requires_grad(true);
        (void)w.grad();  // allocate zeros
        Adam opt({w}, 0.01f);
        opt.step();
        CHECK(w.values()[0] == 1.0f);
        CHECK(w.values()[1] == -2.0f);
    }

    SECTION("first step moves by about -lr") {
        auto w = Tensor::from_data({1}, {0.0f}).set_requires_grad(true);
        w.grad()[0] = 1.0f;
        Adam opt({w}, 0.01f);
        opt.step();
        CHECK(w.values()[0] == Catch::Approx(-0.01).epsilon(1e-4));
    }

    SECTION("quadratic bowl converges from w=3") {
        auto w = Tensor::from_data({1}, {3.0f}).set_requires_grad(true);
        Adam opt({w}, 0.01f);
        for (int i = 0; i < 2000; ++i) {
            w.grad()[0] = 2.0f * w.values()[0];  // d/dw w^2
            opt.step();
        }
        CHECK(std::abs(w.values()[0]) < 1e-3);
    }

    SECTION("non-finite gradient halts with a diagnostic") {
        auto w = Tensor::from_data({1}, {0.0f}).set_requires_grad(true);
        w.grad()[0] = std::numeric_limits<float>::infinity();
        Adam opt({w}, 0.01f);
        CHECK_THROWS_AS(opt.step(), DivergenceError);
    }
}

TEST_CASE("trainer learns the chain MDP to the value-iteration optimum") {
    testsup::ChainEnv env;
    auto model = testsup::MlpQModel::init(testsup::ChainEnv::kStates, 64, 42);

    TrainerConfig cfg;
    cfg.gamma = 0.9;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 64;
    cfg.buffer_capacity = 5000;
    cfg.target_sync_period = 200;
    cfg.epsilon_start = 1.0;
    cfg.epsilon_end = 0.1;
    cfg.epsilon_decay_steps = 6000;
    cfg.warmup_steps = 500;
    cfg.train_frequency = 1;
    cfg.total_steps = 20500;  // exactly 20k updates after warmup
    cfg.epoch_steps = 5000;
    cfg.num_workers = 2;

    auto result = train(env, model, cfg, 7);
    CHECK(result.updates == 20001);

    auto qstar = testsup::chain_optimal_q(cfg.gamma);
    double max_err = 0;
    for (int s = 0; s < 4; ++s) {
        auto q = model.q_forward(nullptr, s);
        const int greedy = q.values()[1] >= q.values()[0] ? 1 : 0;
        const int optimal = qstar[s][1] >= qstar[s][0] ? 1 : 0;
        CHECK(greedy == optimal);
        for (int a = 0; a < 2; ++a)
            max_err = std::max(max_err, std::abs(q.values()[a] - qstar[s][a]));
    }
    INFO("max |Q - Q*| = " << max_err);
    CHECK(max_err < 0.05);

    SECTION("metrics rows cover every epoch with eval pairs") {
        CHECK(result.metrics.size() == 4);  // 20500 / 5000
        for (const auto& row : result.metrics) CHECK(row.env_steps % cfg.epoch_steps == 0);
    }
}

TEST_CASE("training is deterministic for a fixed seed and worker count") {
    auto run = [](int workers) {
        testsup::ChainEnv env;
        auto model = testsup::MlpQModel::init(testsup::ChainEnv::kStates, 16, 9);
        TrainerConfig cfg;
        cfg.gamma = 0.9;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 16;
        cfg.buffer_capacity = 500;
        cfg.target_sync_period = 100;
        cfg.epsilon_decay_steps = 500;
        cfg.warmup_steps = 50;
        cfg.total_steps = 1200;
        cfg.epoch_steps = 400;
        cfg.num_workers = workers;
        auto res = train(env, model, cfg, 99);
        std::vector<float> weights;
        model.for_each_param([&](const std::string&, Tensor& t) {
            weights.insert(weights.end(), t.values().begin(), t.values().end());
        });
        return std::pair(res.metrics, weights);
    };
    auto [m1, w1] = run(2);
    auto [m2, w2] = run(2);
    CHECK(w1 == w2);
    REQUIRE(m1.size() == m2.size());
    for (size_t i = 0; i < m1.size(); ++i) {
        CHECK(m1[i].mean_eval_reward == m2[i].mean_eval_reward);
        CHECK(m1[i].loss_mean == m2[i].loss_mean);
    }
}
